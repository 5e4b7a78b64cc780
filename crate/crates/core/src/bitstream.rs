//! Packing byte payloads into the `H x W x B` bit tensor the networks consume.
//!
//! Layout is fixed for interoperability: a 32-bit big-endian length header
//! (in bytes), then the payload bytes MSB-first, then zero padding. Bits fill
//! the tensor in row-major order: H, then W, then B.

use crate::error::{Error, Result};
use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const HEADER_BITS: usize = 32;

/// Byte payload to conceal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    bytes: Vec<u8>,
}

impl Payload {
    pub fn new(bytes: Vec<u8>) -> Self {
        Payload { bytes }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Binary message tensor of shape `(H, W, B)` with elements in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageTensor {
    bits: Array3<u8>,
}

impl MessageTensor {
    /// Wraps a bit array, rejecting values outside `{0, 1}` or empty dims.
    pub fn new(bits: Array3<u8>) -> Result<Self> {
        let (h, w, b) = bits.dim();
        if h == 0 || w == 0 || b == 0 {
            return Err(Error::ShapeMismatch {
                expected: "H, W, B >= 1".into(),
                got: format!("({h}, {w}, {b})"),
            });
        }
        if bits.iter().any(|&v| v > 1) {
            return Err(Error::InvalidImage("message bits must be 0 or 1".into()));
        }
        Ok(MessageTensor { bits })
    }

    pub fn bits(&self) -> &Array3<u8> {
        &self.bits
    }

    /// `(H, W, B)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.bits.dim()
    }

    pub fn bits_per_pixel(&self) -> usize {
        self.bits.dim().2
    }

    /// Total bit count `m = H * W * B`.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// The bits as floats, for feeding loss functions.
    pub fn to_f32(&self) -> Array3<f32> {
        self.bits.mapv(|b| b as f32)
    }
}

fn check_dims(h: usize, w: usize, b: usize) -> Result<()> {
    if h == 0 || w == 0 || b == 0 {
        return Err(Error::Config(format!(
            "message tensor dims must be >= 1, got ({h}, {w}, {b})"
        )));
    }
    Ok(())
}

/// Packs `payload` into an `(h, w, b)` bit tensor with the header described
/// at module level.
pub fn pack_message(payload: &Payload, h: usize, w: usize, b: usize) -> Result<MessageTensor> {
    check_dims(h, w, b)?;
    let capacity = h * w * b;
    let required = HEADER_BITS + 8 * payload.len();
    if required > capacity {
        return Err(Error::CapacityExceeded { required, capacity });
    }
    let mut bits = Array3::<u8>::zeros((h, w, b));
    {
        let flat = bits.as_slice_mut().expect("fresh array is contiguous");
        let len = payload.len() as u32;
        for (i, slot) in flat.iter_mut().take(HEADER_BITS).enumerate() {
            *slot = ((len >> (31 - i)) & 1) as u8;
        }
        for (j, &byte) in payload.bytes().iter().enumerate() {
            for k in 0..8 {
                flat[HEADER_BITS + 8 * j + k] = (byte >> (7 - k)) & 1;
            }
        }
    }
    MessageTensor::new(bits)
}

/// Inverse of [`pack_message`]: reads the length header and extracts the
/// payload bytes.
pub fn unpack_message(message: &MessageTensor) -> Result<Payload> {
    let flat = message
        .bits
        .as_slice()
        .map(<[u8]>::to_vec)
        .unwrap_or_else(|| message.bits.iter().copied().collect());
    let capacity = flat.len();
    if capacity < HEADER_BITS {
        return Err(Error::MalformedHeader(format!(
            "tensor holds {capacity} bits, fewer than the {HEADER_BITS}-bit header"
        )));
    }
    let mut len: u64 = 0;
    for &bit in flat.iter().take(HEADER_BITS) {
        len = (len << 1) | u64::from(bit);
    }
    let required = HEADER_BITS as u64 + 8 * len;
    if required > capacity as u64 {
        return Err(Error::MalformedHeader(format!(
            "declared length {len} bytes needs {required} bits but the tensor holds {capacity}"
        )));
    }
    let mut bytes = Vec::with_capacity(len as usize);
    for j in 0..len as usize {
        let mut byte = 0u8;
        for k in 0..8 {
            byte = (byte << 1) | flat[HEADER_BITS + 8 * j + k];
        }
        bytes.push(byte);
    }
    Ok(Payload::new(bytes))
}

/// Independent Bernoulli(0.5) bits, deterministic for a fixed seed.
pub fn sample_random_message(h: usize, w: usize, b: usize, seed: u64) -> Result<MessageTensor> {
    check_dims(h, w, b)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let bits = Array3::from_shape_simple_fn((h, w, b), || rng.random::<bool>() as u8);
    MessageTensor::new(bits)
}

/// Fraction of differing bits, in `[0, 1]`.
pub fn error_rate(predicted: &MessageTensor, reference: &MessageTensor) -> Result<f64> {
    if predicted.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", reference.shape()),
            got: format!("{:?}", predicted.shape()),
        });
    }
    let wrong = predicted
        .bits
        .iter()
        .zip(reference.bits.iter())
        .filter(|(a, b)| a != b)
        .count();
    Ok(wrong as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_packs_to_all_zero() {
        let m = pack_message(&Payload::new(vec![]), 4, 4, 2).unwrap();
        assert!(m.bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn single_byte_layout_is_fixed() {
        let m = pack_message(&Payload::new(vec![0xFF]), 4, 4, 4).unwrap();
        let flat: Vec<u8> = m.bits().iter().copied().collect();
        // Header encodes 1: bits 0..30 zero, bit 31 one.
        assert!(flat[..31].iter().all(|&b| b == 0));
        assert_eq!(flat[31], 1);
        assert!(flat[32..40].iter().all(|&b| b == 1));
        assert!(flat[40..].iter().all(|&b| b == 0));
    }

    #[test]
    fn capacity_is_checked() {
        let err = pack_message(&Payload::new(vec![1, 2, 3]), 2, 2, 4).unwrap_err();
        assert!(matches!(err, Error::CapacityExceeded { required: 56, capacity: 16 }));
    }

    #[test]
    fn all_zero_tensor_unpacks_to_empty_payload() {
        let m = MessageTensor::new(Array3::zeros((4, 4, 2))).unwrap();
        assert_eq!(unpack_message(&m).unwrap().len(), 0);
    }

    #[test]
    fn oversized_header_is_malformed() {
        // Header reading 10^9 bytes in a 16x16x1 tensor.
        let mut bits = Array3::<u8>::zeros((16, 16, 1));
        let len: u32 = 1_000_000_000;
        {
            let flat = bits.as_slice_mut().unwrap();
            for (i, slot) in flat.iter_mut().take(32).enumerate() {
                *slot = ((len >> (31 - i)) & 1) as u8;
            }
        }
        let m = MessageTensor::new(bits).unwrap();
        assert!(matches!(unpack_message(&m), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn sixteen_byte_roundtrip() {
        let payload = Payload::new((0..16u8).map(|i| i.wrapping_mul(37).wrapping_add(11)).collect());
        let m = pack_message(&payload, 16, 16, 1).unwrap();
        assert_eq!(unpack_message(&m).unwrap(), payload);
    }

    #[test]
    fn same_seed_is_deterministic_and_neighbors_differ() {
        let a = sample_random_message(8, 8, 2, 99).unwrap();
        let b = sample_random_message(8, 8, 2, 99).unwrap();
        let c = sample_random_message(8, 8, 2, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bernoulli_mean_is_near_half() {
        // 99.99% binomial interval for 4096 fair draws is within [0.44, 0.56].
        let m = sample_random_message(64, 64, 1, 7).unwrap();
        let mean = m.bits().iter().map(|&b| b as f64).sum::<f64>() / m.len() as f64;
        assert!((0.44..=0.56).contains(&mean), "mean {mean}");
    }

    #[test]
    fn error_rate_counts_flips() {
        let m = sample_random_message(2, 2, 2, 1).unwrap();
        assert_eq!(error_rate(&m, &m).unwrap(), 0.0);
        let flipped = MessageTensor::new(m.bits().mapv(|b| 1 - b)).unwrap();
        assert_eq!(error_rate(&flipped, &m).unwrap(), 1.0);
        let mut one = m.bits().clone();
        one[[0, 0, 0]] = 1 - one[[0, 0, 0]];
        let one = MessageTensor::new(one).unwrap();
        assert_eq!(error_rate(&one, &m).unwrap(), 0.125);
    }

    #[test]
    fn error_rate_rejects_shape_mismatch() {
        let a = sample_random_message(2, 2, 1, 0).unwrap();
        let b = sample_random_message(2, 2, 2, 0).unwrap();
        assert!(matches!(error_rate(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_identity(
            bytes in proptest::collection::vec(any::<u8>(), 0..48),
            h in 4usize..24,
            w in 4usize..24,
            b in 1usize..5,
        ) {
            let payload = Payload::new(bytes);
            prop_assume!(32 + 8 * payload.len() <= h * w * b);
            let m = pack_message(&payload, h, w, b).unwrap();
            prop_assert_eq!(unpack_message(&m).unwrap(), payload);
        }

        #[test]
        fn error_rate_is_a_scaled_metric(
            seed_a in 0u64..500, seed_b in 0u64..500,
        ) {
            let a = sample_random_message(6, 6, 2, seed_a).unwrap();
            let b = sample_random_message(6, 6, 2, seed_b).unwrap();
            let ab = error_rate(&a, &b).unwrap();
            let ba = error_rate(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}

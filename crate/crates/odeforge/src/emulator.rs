//! Functional emulation of the accelerator's host-device contract.
//!
//! The core is configured for one architecture at construction and then
//! driven through two modes. In weight-transfer mode the host streams a
//! weight image; the core answers with a nonzero 32-bit acknowledge word on
//! success and zero otherwise, leaving its state untouched on failure. In
//! feature-map-computation mode the host sends one pre-processed feature map
//! per request and receives the pooled feature vector, computed bit-exactly
//! like the quantized reference path. Pre-processing (the input convolution)
//! and post-processing (the classifier head) stay on the host in floating
//! point.

use crate::error::{Error, Result};
use crate::fixed::{FixedPointFormat, QTensor};
use crate::layers::{batchnorm_forward, fc_forward, relu_forward};
use crate::model::{ConvStep, ConvUnit, Fc, ModelSpec};
use crate::quant::{QModel, QuantScheme};
use crate::tensor::Tensor;
use crate::wire::{parse_weight_image, write_weight_image, WeightRecord};

/// Acknowledge word returned after a successful weight transfer. Any nonzero
/// value satisfies the contract; a constant keeps tests exact.
pub const ACK_WORD: u32 = 1;
/// Returned when a weight transfer is rejected.
pub const NACK_WORD: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmulatorMode {
    Idle,
    WeightTransfer,
    Compute,
}

/// The device-side state machine. Single-owner: one caller drives the mode
/// machine at a time; the state may move between threads between requests.
#[derive(Debug, Clone)]
pub struct Emulator {
    spec: ModelSpec,
    scheme: QuantScheme,
    mode: EmulatorMode,
    loaded: bool,
    device: Option<QModel>,
}

impl Emulator {
    /// A core synthesized for one model architecture and datapath scheme.
    pub fn new(spec: ModelSpec, scheme: QuantScheme) -> Result<Emulator> {
        spec.validate()?;
        Ok(Emulator {
            spec,
            scheme,
            mode: EmulatorMode::Idle,
            loaded: false,
            device: None,
        })
    }

    pub fn mode(&self) -> EmulatorMode {
        self.mode
    }

    pub fn loaded(&self) -> bool {
        self.loaded
    }

    /// Expected entry feature-map shape `(C, H, W)`.
    pub fn entry_shape(&self) -> [usize; 3] {
        self.spec.entry_shape()
    }

    pub fn act_fmt(&self) -> FixedPointFormat {
        self.scheme.other_fmt
    }

    /// Stream a weight image into the core. Returns the 32-bit acknowledge
    /// word: nonzero on success, zero on any malformed or mismatched stream
    /// (in which case the previous state is kept). Loading twice replaces
    /// the earlier weights.
    pub fn load_weights(&mut self, image: &[u8]) -> u32 {
        self.mode = EmulatorMode::WeightTransfer;
        let result = self.try_load(image);
        self.mode = EmulatorMode::Idle;
        match result {
            Ok(()) => {
                self.loaded = true;
                ACK_WORD
            }
            Err(_) => NACK_WORD,
        }
    }

    fn try_load(&mut self, image: &[u8]) -> Result<()> {
        let records = parse_weight_image(image)?;
        let arrays: Vec<(String, QTensor)> = records
            .iter()
            .map(|r| Ok((r.name.clone(), r.to_qtensor()?)))
            .collect::<Result<_>>()?;
        let device = QModel::from_arrays(&self.spec, &self.scheme, &arrays)?;
        self.device = Some(device);
        Ok(())
    }

    /// Process one feature map. Requires a successful weight transfer first;
    /// the request count and arithmetic are independent of the data values.
    pub fn compute(&mut self, fmap: &QTensor) -> Result<QTensor> {
        if !self.loaded {
            return Err(Error::Protocol(
                "compute requested before any weight transfer was acknowledged".to_string(),
            ));
        }
        let device = self.device.as_ref().expect("loaded implies a device model");
        self.mode = EmulatorMode::Compute;
        let result = device.blocks.forward(fmap);
        self.mode = EmulatorMode::Idle;
        let (features, _sats) = result?;
        Ok(features)
    }
}

/// Serialize a quantized model's block arrays into a weight image, in graph
/// declaration order.
pub fn serialize_weights(qmodel: &QModel) -> Vec<u8> {
    let records: Vec<WeightRecord> = qmodel
        .named_arrays()
        .into_iter()
        .map(|(name, t)| WeightRecord::from_qtensor(&name, t))
        .collect();
    write_weight_image(&records)
}

/// Parse a weight image into its records. See [`crate::wire`] for the layout.
pub fn parse_weights(image: &[u8]) -> Result<Vec<WeightRecord>> {
    parse_weight_image(image)
}

/// Host-side pre-processing: float input convolution, normalization, and
/// ReLU, then quantization to the core's entry activation format.
pub fn host_preprocess(image: &Tensor, pre: &ConvStep, act_fmt: FixedPointFormat) -> Result<QTensor> {
    let conv_out = match &pre.conv {
        ConvUnit::Standard(c) => c.forward(image)?,
        ConvUnit::Separable { dw, pw } => pw.forward(&dw.forward(image)?)?,
    };
    let float = relu_forward(&batchnorm_forward(&conv_out, &pre.bn.params())?);
    QTensor::quantize(&float, act_fmt)
}

/// Host-side post-processing: dequantize the pooled features and apply the
/// float classifier head.
pub fn host_postprocess(features: &QTensor, fc: &Fc) -> Result<Tensor> {
    let flat = features.dequantize();
    let vec = Tensor::rank1(flat.data().to_vec())?;
    fc_forward(&vec, &fc.weight, &fc.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelSpec, Variant};
    use crate::quant::quantize_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(Variant::DsOdeNet, 3);
        spec.base_channels = 4;
        spec.c_iters = 2;
        spec.input_shape = [3, 8, 8];
        spec
    }

    fn trained_like_model(seed: u64) -> (ModelSpec, Model) {
        let spec = small_spec();
        let mut model = Model::init(&spec, seed).unwrap();
        for p in model.params_mut() {
            p.scale(0.5);
        }
        (spec, model)
    }

    fn random_fmap(spec: &ModelSpec, fmt: FixedPointFormat, seed: u64) -> QTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = spec.entry_shape();
        let len = shape.iter().product();
        let t = Tensor::from_vec(
            shape.to_vec(),
            (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        QTensor::quantize(&t, fmt).unwrap()
    }

    #[test]
    fn valid_image_acknowledged_and_loaded() {
        let (spec, model) = trained_like_model(1);
        let scheme = QuantScheme::default();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let image = serialize_weights(&qm);
        let mut emu = Emulator::new(spec, scheme).unwrap();
        assert_eq!(emu.load_weights(&image), ACK_WORD);
        assert!(emu.loaded());
        assert_eq!(emu.mode(), EmulatorMode::Idle);
    }

    #[test]
    fn truncated_stream_rejected_state_unchanged() {
        let (spec, model) = trained_like_model(2);
        let scheme = QuantScheme::default();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let image = serialize_weights(&qm);
        let mut emu = Emulator::new(spec, scheme).unwrap();
        assert_eq!(emu.load_weights(&image[..image.len() / 2]), NACK_WORD);
        assert!(!emu.loaded());
    }

    #[test]
    fn compute_before_load_is_a_protocol_error() {
        let spec = small_spec();
        let scheme = QuantScheme::default();
        let mut emu = Emulator::new(spec.clone(), scheme.clone()).unwrap();
        let fmap = random_fmap(&spec, scheme.other_fmt, 3);
        let err = emu.compute(&fmap).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn loading_twice_replaces_weights() {
        let (spec, model_a) = trained_like_model(4);
        let (_, model_b) = trained_like_model(5);
        let scheme = QuantScheme::default();
        let (qa, _) = quantize_model(&model_a, &scheme).unwrap();
        let (qb, _) = quantize_model(&model_b, &scheme).unwrap();
        let mut emu = Emulator::new(spec.clone(), scheme.clone()).unwrap();
        assert_eq!(emu.load_weights(&serialize_weights(&qa)), ACK_WORD);
        let fmap = random_fmap(&spec, scheme.other_fmt, 6);
        let out_a = emu.compute(&fmap).unwrap();
        assert_eq!(emu.load_weights(&serialize_weights(&qb)), ACK_WORD);
        let out_b = emu.compute(&fmap).unwrap();
        let (want_b, _) = qb.blocks.forward(&fmap).unwrap();
        assert_eq!(out_b.words(), want_b.words());
        assert_ne!(out_a.words(), out_b.words());
    }

    #[test]
    fn compute_matches_reference_bitwise_and_is_deterministic() {
        let (spec, model) = trained_like_model(7);
        let scheme = QuantScheme::default();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let mut emu = Emulator::new(spec.clone(), scheme.clone()).unwrap();
        assert_eq!(emu.load_weights(&serialize_weights(&qm)), ACK_WORD);
        let fmap = random_fmap(&spec, scheme.other_fmt, 8);
        let out1 = emu.compute(&fmap).unwrap();
        let out2 = emu.compute(&fmap).unwrap();
        assert_eq!(out1.words(), out2.words());
        let (want, _) = qm.blocks.forward(&fmap).unwrap();
        assert_eq!(out1.words(), want.words());
        assert_eq!(out1.shape(), &[spec.feature_channels(), 1, 1]);
    }

    #[test]
    fn wrong_shape_rejected() {
        let (spec, model) = trained_like_model(9);
        let scheme = QuantScheme::default();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let mut emu = Emulator::new(spec, scheme.clone()).unwrap();
        assert_eq!(emu.load_weights(&serialize_weights(&qm)), ACK_WORD);
        let bad = QTensor::zeros(&[2, 8, 8], scheme.other_fmt);
        assert!(emu.compute(&bad).is_err());
    }

    #[test]
    fn image_for_wrong_architecture_rejected() {
        let (_, model) = trained_like_model(10);
        let scheme = QuantScheme::default();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let image = serialize_weights(&qm);
        let mut other = small_spec();
        other.base_channels = 8;
        let mut emu = Emulator::new(other, scheme).unwrap();
        assert_eq!(emu.load_weights(&image), NACK_WORD);
        assert!(!emu.loaded());
    }

    #[test]
    fn host_pipeline_matches_quantized_forward() {
        let (spec, model) = trained_like_model(11);
        let scheme = QuantScheme::default();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let mut emu = Emulator::new(spec.clone(), scheme.clone()).unwrap();
        assert_eq!(emu.load_weights(&serialize_weights(&qm)), ACK_WORD);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let len: usize = spec.input_shape.iter().product();
        let image = Tensor::from_vec(
            spec.input_shape.to_vec(),
            (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        // host side: preprocess, device compute, postprocess
        let entry = host_preprocess(&image, &qm.pre, scheme.other_fmt).unwrap();
        assert_eq!(entry.shape(), &spec.entry_shape());
        let features = emu.compute(&entry).unwrap();
        let logits = host_postprocess(&features, &qm.fc).unwrap();
        assert_eq!(logits.len(), spec.classes);
        // reference: the in-process quantized path
        let want = qm.quantized_forward(&image).unwrap();
        assert_eq!(features.words(), want.q_features.words());
        for (a, b) in logits.data().iter().zip(want.logits.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_weights_zero_input_zero_output() {
        let spec = small_spec();
        let scheme = QuantScheme::default();
        let model = Model::zeros(&spec).unwrap();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let mut emu = Emulator::new(spec.clone(), scheme.clone()).unwrap();
        assert_eq!(emu.load_weights(&serialize_weights(&qm)), ACK_WORD);
        let fmap = QTensor::zeros(&spec.entry_shape(), scheme.other_fmt);
        let out = emu.compute(&fmap).unwrap();
        assert!(out.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn serialize_parse_round_trip() {
        let (_, model) = trained_like_model(13);
        let scheme = QuantScheme::default();
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let image = serialize_weights(&qm);
        let records = parse_weights(&image).unwrap();
        let named = qm.named_arrays();
        assert_eq!(records.len(), named.len());
        for (r, (name, t)) in records.iter().zip(&named) {
            assert_eq!(&r.name, name);
            assert_eq!(r.words, t.words());
            assert_eq!(r.fmt, t.fmt());
        }
    }
}

//! Feature encoder, valence classifier and dataset critic.
//!
//! All three networks are bias-free. The encoder is two valid-mode
//! convolutions (kernel 15, then kernel 5 dilated by 2) with ReLU, a global
//! max over time and dropout. Classifier and critic are three fully
//! connected layers with ReLU between them; the classifier ends in a
//! softmax over the three valence bins, the critic in a linear output.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::RunRng;
use crate::tensor::{self, Tape, Tensor, Var};

pub const N_MELS: usize = 40;
pub const N_CLASSES: usize = 3;
pub const CONV1_KERNEL: usize = 15;
pub const CONV2_KERNEL: usize = 5;
pub const CONV2_DILATION: usize = 2;
pub const DROPOUT_P: f64 = 0.2;
pub const DEFAULT_CHANNELS: usize = 128;
/// Shortest utterance (in frames) the encoder accepts.
pub const RECEPTIVE_FIELD: usize = CONV1_KERNEL + CONV2_DILATION * (CONV2_KERNEL - 1);

const CHECKPOINT_MAGIC: &[u8; 4] = b"DGP1";

/// A named, fixed-order collection of weight tensors.
pub trait ParamGroup<S: Scalar> {
    fn names(&self) -> &'static [&'static str];
    fn tensors(&self) -> Vec<&Tensor<S>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>>;

    /// Registers every weight on `tape`, as leaves when `trainable`.
    fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn max_abs(&self) -> S {
        self.tensors().iter().fold(S::zero(), |m, t| m.max(t.max_abs()))
    }
}

/// Dropout behaviour of an encoder pass.
pub enum Mode<'a> {
    Train(&'a mut RunRng),
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S> {
    pub conv1: Tensor<S>,
    pub conv2: Tensor<S>,
    pub dropout_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<S> {
    pub fc1: Tensor<S>,
    pub fc2: Tensor<S>,
    pub fc3: Tensor<S>,
}

/// Linear-output critic; one output for ADDoG, one per dataset for MADDoG.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic<S> {
    pub fc1: Tensor<S>,
    pub fc2: Tensor<S>,
    pub fc3: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    pub encoder: Encoder<S>,
    pub classifier: Classifier<S>,
    pub critic: Critic<S>,
}

impl<S: Scalar> ParamGroup<S> for Encoder<S> {
    fn names(&self) -> &'static [&'static str] {
        &["encoder.conv1", "encoder.conv2"]
    }
    fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.conv1, &self.conv2]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.conv1, &mut self.conv2]
    }
}

impl<S: Scalar> ParamGroup<S> for Classifier<S> {
    fn names(&self) -> &'static [&'static str] {
        &["classifier.fc1", "classifier.fc2", "classifier.fc3"]
    }
    fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.fc1, &self.fc2, &self.fc3]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.fc1, &mut self.fc2, &mut self.fc3]
    }
}

impl<S: Scalar> ParamGroup<S> for Critic<S> {
    fn names(&self) -> &'static [&'static str] {
        &["critic.fc1", "critic.fc2", "critic.fc3"]
    }
    fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.fc1, &self.fc2, &self.fc3]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.fc1, &mut self.fc2, &mut self.fc3]
    }
}

/// Scaled uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn init_weight<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::of(dist.sample(rng))).collect()).expect("shape")
}

impl<S: Scalar> Encoder<S> {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: init_weight(&[channels, N_MELS, CONV1_KERNEL], rng),
            conv2: init_weight(&[channels, channels, CONV2_KERNEL], rng),
            dropout_p: DROPOUT_P,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.shape()[0]
    }

    /// Encodes a `B x 40 x T` batch on the tape; `vars` from [`ParamGroup::bind`].
    pub fn forward(&self, tape: &mut Tape<S>, vars: &[Var], x: Var, lengths: &[usize], mode: Mode<'_>) -> Result<Var> {
        check_lengths(lengths)?;
        let h = tape.conv1d(x, vars[0], 1)?;
        let h = tape.relu(h);
        let h = tape.conv1d(h, vars[1], CONV2_DILATION)?;
        let h = tape.relu(h);
        let r = tape.global_max_pool(h)?;
        match mode {
            Mode::Train(rng) => tape.dropout(r, self.dropout_p, true, rng),
            Mode::Eval => Ok(r),
        }
    }

    /// Inference-mode encoding without a tape.
    pub fn encode(&self, x: &Tensor<S>, lengths: &[usize]) -> Result<Tensor<S>> {
        check_lengths(lengths)?;
        let h = tensor::relu(&tensor::conv1d(x, &self.conv1, 1)?);
        let h = tensor::relu(&tensor::conv1d(&h, &self.conv2, CONV2_DILATION)?);
        tensor::global_max_pool(&h)
    }
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    match lengths.iter().min() {
        Some(&short) if short < RECEPTIVE_FIELD => {
            Err(Error::TooShort { op: "encode", got: short, need: RECEPTIVE_FIELD })
        }
        _ => Ok(()),
    }
}

fn three_layer<S: Scalar>(tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
    let h = tape.linear(x, vars[0])?;
    let h = tape.relu(h);
    let h = tape.linear(h, vars[1])?;
    let h = tape.relu(h);
    tape.linear(h, vars[2])
}

fn three_layer_plain<S: Scalar>(w: [&Tensor<S>; 3], x: &Tensor<S>) -> Result<Tensor<S>> {
    let h = tensor::relu(&tensor::linear(x, w[0])?);
    let h = tensor::relu(&tensor::linear(&h, w[1])?);
    tensor::linear(&h, w[2])
}

impl<S: Scalar> Classifier<S> {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            fc1: init_weight(&[channels, channels], rng),
            fc2: init_weight(&[channels, channels], rng),
            fc3: init_weight(&[N_CLASSES, channels], rng),
        }
    }

    /// Class probabilities (`B x 3`) on the tape.
    pub fn forward(&self, tape: &mut Tape<S>, vars: &[Var], reps: Var) -> Result<Var> {
        let logits = three_layer(tape, vars, reps)?;
        Ok(tape.softmax(logits))
    }

    pub fn classify(&self, reps: &Tensor<S>) -> Result<Tensor<S>> {
        let logits = three_layer_plain([&self.fc1, &self.fc2, &self.fc3], reps)?;
        Ok(tensor::softmax(&logits))
    }
}

impl<S: Scalar> Critic<S> {
    pub fn init<R: Rng + ?Sized>(channels: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            fc1: init_weight(&[channels, channels], rng),
            fc2: init_weight(&[channels, channels], rng),
            fc3: init_weight(&[outputs, channels], rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.fc3.shape()[0]
    }

    /// Unnormalised scores (`B x D_out`) on the tape.
    pub fn forward(&self, tape: &mut Tape<S>, vars: &[Var], reps: Var) -> Result<Var> {
        three_layer(tape, vars, reps)
    }

    pub fn criticize(&self, reps: &Tensor<S>) -> Result<Tensor<S>> {
        three_layer_plain([&self.fc1, &self.fc2, &self.fc3], reps)
    }
}

impl<S: Scalar> ParamSet<S> {
    /// Seeded initialisation of all three networks.
    pub fn init(seed: u64, channels: usize, critic_outputs: usize) -> Self {
        let mut rng = crate::seed::rng_for(seed, "init", 0);
        Self {
            encoder: Encoder::init(channels, &mut rng),
            classifier: Classifier::init(channels, &mut rng),
            critic: Critic::init(channels, critic_outputs, &mut rng),
        }
    }

    fn groups(&self) -> [(&'static [&'static str], Vec<&Tensor<S>>); 3] {
        [
            (self.encoder.names(), self.encoder.tensors()),
            (self.classifier.names(), self.classifier.tensors()),
            (self.critic.names(), self.critic.tensors()),
        ]
    }

    /// Writes the `DGP1` checkpoint: magic, then for each tensor a u32 name
    /// length, the UTF-8 name, a u32 rank, u32 dims and little-endian f64
    /// values. All integers are little endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = CHECKPOINT_MAGIC.to_vec();
        for (names, tensors) in self.groups() {
            for (name, t) in names.iter().zip(tensors) {
                buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    buf.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        crate::fsio::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "DGP1" });
        }
        let corrupt = |detail: &str| Error::Corrupt { path: path.into(), detail: detail.into() };
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
            pos += n;
            Ok(s)
        };
        let mut found = std::collections::HashMap::new();
        loop {
            let Ok(len) = take(4) else { break };
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(n * 8)?;
            let data =
                raw.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap()))).collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
            found.insert(name, t);
        }
        let mut get = |name: &str| found.remove(name).ok_or_else(|| corrupt(&format!("missing tensor {name}")));
        Ok(Self {
            encoder: Encoder { conv1: get("encoder.conv1")?, conv2: get("encoder.conv2")?, dropout_p: DROPOUT_P },
            classifier: Classifier {
                fc1: get("classifier.fc1")?,
                fc2: get("classifier.fc2")?,
                fc3: get("classifier.fc3")?,
            },
            critic: Critic { fc1: get("critic.fc1")?, fc2: get("critic.fc2")?, fc3: get("critic.fc3")? },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zeros_batch(b: usize, t: usize) -> Tensor<f64> {
        Tensor::zeros(&[b, N_MELS, t])
    }

    #[test]
    fn receptive_field_is_23() {
        assert_eq!(RECEPTIVE_FIELD, 23);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ParamSet::<f64>::init(5, 16, 1);
        let b = ParamSet::<f64>::init(5, 16, 1);
        assert_eq!(a, b);
        assert_ne!(a, ParamSet::<f64>::init(6, 16, 1));
        let bound = (6.0f64 / 600.0).sqrt();
        assert!((bound - 0.1).abs() < 1e-12);
        assert!(a.encoder.conv1.max_abs() <= bound);
    }

    #[test]
    fn init_spread_matches_uniform() {
        let mut rng = RunRng::seed_from_u64(11);
        let w: Tensor<f64> = init_weight(&[100, 600], &mut rng);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = 0.1 / 3f64.sqrt();
        assert!((sd / expected - 1.0).abs() < 0.05, "sd {sd} vs {expected}");
    }

    #[test]
    fn zero_input_propagates() {
        let p = ParamSet::<f64>::init(1, 8, 2);
        let reps = p.encoder.encode(&zeros_batch(2, 30), &[30, 25]).unwrap();
        assert_eq!(reps.shape(), &[2, 8]);
        assert!(reps.data().iter().all(|&v| v == 0.0));
        let probs = p.classifier.classify(&reps).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let scores = p.critic.criticize(&reps).unwrap();
        assert_eq!(scores.shape(), &[2, 2]);
        assert!(scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_utterance_rejected() {
        let p = ParamSet::<f64>::init(1, 4, 1);
        match p.encoder.encode(&zeros_batch(1, 30), &[22]) {
            Err(Error::TooShort { need: 23, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hand_computed_classifier() {
        // 2-wide variant: fc1 = I, fc2 = [[1,0],[0,2]], fc3 rows pick features.
        let c = Classifier::<f64> {
            fc1: Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap(),
            fc2: Tensor::from_f64(&[2, 2], &[1., 0., 0., 2.]).unwrap(),
            fc3: Tensor::from_f64(&[3, 2], &[1., 0., 0., 1., 0., 0.]).unwrap(),
        };
        let reps = Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap();
        // hidden: relu([1,-1]) = [1,0]; relu([1,0]) = [1,0]; logits [1,0,0]
        let p = c.classify(&reps).unwrap();
        let z = 1f64.exp() + 2.0;
        let expected = [1f64.exp() / z, 1.0 / z, 1.0 / z];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn clipped_critic_score_bound() {
        // With every weight at +-c, |score| <= c^3 * w^2 * sum|r| by interval arithmetic.
        let width = 8;
        let c = 0.01;
        let critic = Critic::<f64> {
            fc1: Tensor::from_f64(&[width, width], &vec![c; width * width]).unwrap(),
            fc2: Tensor::from_f64(&[width, width], &vec![c; width * width]).unwrap(),
            fc3: Tensor::from_f64(&[1, width], &vec![c; width]).unwrap(),
        };
        let reps = Tensor::from_f64(&[1, width], &[1.0; 8]).unwrap();
        let s = critic.criticize(&reps).unwrap().data()[0];
        let bound = c.powi(3) * (width * width) as f64 * width as f64;
        assert!(s.abs() <= bound + 1e-18);
        assert!((s - bound).abs() < 1e-15, "all-positive weights reach the bound");
    }

    #[test]
    fn eval_forward_matches_tape() {
        let p = ParamSet::<f64>::init(3, 6, 1);
        let mut rng = RunRng::seed_from_u64(0);
        let x: Tensor<f64> = init_weight::<f64, _>(&[2, N_MELS, 26], &mut rng).map(|v| v.abs());
        let plain = p.encoder.encode(&x, &[26, 24]).unwrap();
        let mut tape = Tape::new();
        let vars = p.encoder.bind(&mut tape, true);
        let xv = tape.constant(x);
        let r = p.encoder.forward(&mut tape, &vars, xv, &[26, 24], Mode::Eval).unwrap();
        assert_eq!(tape.value(r), &plain);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dgp");
        let p = ParamSet::<f64>::init(9, 4, 3);
        p.save(&path).unwrap();
        assert_eq!(ParamSet::<f64>::load(&path).unwrap(), p);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(ParamSet::<f64>::load(&path), Err(Error::Corrupt { .. })));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(ParamSet::<f64>::load(&path), Err(Error::BadMagic { .. })));
    }
}

//! Victim classifier: a small CNN that doubles as the feature extractor for
//! the perceptual loss. Runs entirely in f64 so attack gradients and the
//! perceptual-distance gradient are finite-difference clean.

use crate::data_io::{Dataset, Image};
use crate::error::{Error, Result};
use crate::nn::{
    relu3, relu3_backward, softmax_cross_entropy, Adam, Conv2d, Conv2dCache, Linear, ParamView,
    ParamViewMut,
};
use crate::util::rng_for;
use ndarray::{Array1, Array3};

/// Names and declared output shapes of the perceptual feature taps.
pub const TAP_NAMES: [&str; 4] = ["conv1", "conv2", "conv3", "conv4"];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            in_channels: 3,
            num_classes: 6,
            image_size: 32,
            seed: 0,
        }
    }
}

/// Four conv blocks with ReLU and a flatten + linear head. The flat head
/// keeps local evidence un-averaged, mirroring the patch fragility of the
/// large victims this stands in for.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    conv1: Conv2d<f64>,
    conv2: Conv2d<f64>,
    conv3: Conv2d<f64>,
    conv4: Conv2d<f64>,
    head: Linear<f64>,
    /// Accuracy recorded by `train_classifier`.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub struct ClassifierCache {
    c1: Conv2dCache<f64>,
    a1: Array3<f64>,
    t1: Array3<f64>,
    c2: Conv2dCache<f64>,
    a2: Array3<f64>,
    t2: Array3<f64>,
    c3: Conv2dCache<f64>,
    a3: Array3<f64>,
    t3: Array3<f64>,
    c4: Conv2dCache<f64>,
    a4: Array3<f64>,
    t4: Array3<f64>,
    flat_dim: (usize, usize, usize),
    head: crate::nn::LinearCache<f64>,
}

const CH: [usize; 4] = [16, 32, 48, 64];

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Self {
        let mut rng = rng_for(cfg.seed, "classifier-init");
        let spatial = cfg.image_size.div_ceil(8);
        Classifier {
            conv1: Conv2d::new(&mut rng, cfg.in_channels, CH[0], 3, 1),
            conv2: Conv2d::new(&mut rng, CH[0], CH[1], 3, 2),
            conv3: Conv2d::new(&mut rng, CH[1], CH[2], 3, 2),
            conv4: Conv2d::new(&mut rng, CH[2], CH[3], 3, 2),
            head: Linear::new(&mut rng, spatial * spatial * CH[3], cfg.num_classes),
            cfg,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
        }
    }

    /// Declared (H, W, C) shape of each feature tap for `image_size` inputs.
    pub fn tap_shapes(&self) -> Vec<(&'static str, (usize, usize, usize))> {
        let s = self.cfg.image_size;
        vec![
            ("conv1", (s, s, CH[0])),
            ("conv2", (s.div_ceil(2), s.div_ceil(2), CH[1])),
            ("conv3", (s.div_ceil(4), s.div_ceil(4), CH[2])),
            ("conv4", (s.div_ceil(8), s.div_ceil(8), CH[3])),
        ]
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array1<f64>, ClassifierCache) {
        let (h1, c1) = self.conv1.forward(x);
        let (t1, a1) = relu3(&h1);
        let (h2, c2) = self.conv2.forward(&t1);
        let (t2, a2) = relu3(&h2);
        let (h3, c3) = self.conv3.forward(&t2);
        let (t3, a3) = relu3(&h3);
        let (h4, c4) = self.conv4.forward(&t3);
        let (t4, a4) = relu3(&h4);
        let flat_dim = t4.dim();
        let flat = t4
            .clone()
            .into_shape_with_order((1, flat_dim.0 * flat_dim.1 * flat_dim.2))
            .unwrap();
        let (logits2, headc) = self.head.forward(&flat);
        let logits = logits2.row(0).to_owned();
        (
            logits,
            ClassifierCache {
                c1,
                a1,
                t1,
                c2,
                a2,
                t2,
                c3,
                a3,
                t3,
                c4,
                a4,
                t4,
                flat_dim,
                head: headc,
            },
        )
    }

    /// Backpropagate a logit gradient to the input; optionally accumulate
    /// parameter gradients and inject extra gradients at feature taps.
    pub fn backward(
        &self,
        cache: &ClassifierCache,
        dlogits: &Array1<f64>,
        tap_grads: Option<&[(usize, Array3<f64>)]>,
        mut grads: Option<&mut Classifier>,
    ) -> Array3<f64> {
        let dlogits2 = dlogits
            .to_owned()
            .into_shape_with_order((1, self.cfg.num_classes))
            .unwrap();
        let dflat = self.head.backward(
            &cache.head,
            &dlogits2,
            grads.as_deref_mut().map(|g| &mut g.head),
        );
        let mut dt4 = dflat
            .into_shape_with_order(cache.flat_dim)
            .unwrap();
        if let Some(taps) = tap_grads {
            for (idx, g) in taps {
                if *idx == 3 {
                    dt4 = &dt4 + g;
                }
            }
        }
        let dh4 = relu3_backward(&cache.a4, &dt4);
        let mut dt3 = self
            .conv4
            .backward(&cache.c4, &dh4, grads.as_deref_mut().map(|g| &mut g.conv4));
        if let Some(taps) = tap_grads {
            for (idx, g) in taps {
                if *idx == 2 {
                    dt3 = &dt3 + g;
                }
            }
        }
        let dh3 = relu3_backward(&cache.a3, &dt3);
        let mut dt2 = self
            .conv3
            .backward(&cache.c3, &dh3, grads.as_deref_mut().map(|g| &mut g.conv3));
        if let Some(taps) = tap_grads {
            for (idx, g) in taps {
                if *idx == 1 {
                    dt2 = &dt2 + g;
                }
            }
        }
        let dh2 = relu3_backward(&cache.a2, &dt2);
        let mut dt1 = self
            .conv2
            .backward(&cache.c2, &dh2, grads.as_deref_mut().map(|g| &mut g.conv2));
        if let Some(taps) = tap_grads {
            for (idx, g) in taps {
                if *idx == 0 {
                    dt1 = &dt1 + g;
                }
            }
        }
        let dh1 = relu3_backward(&cache.a1, &dt1);
        self.conv1
            .backward(&cache.c1, &dh1, grads.as_deref_mut().map(|g| &mut g.conv1))
    }

    /// Post-activation feature map of tap `idx` from a cache.
    pub fn tap_output<'a>(&self, cache: &'a ClassifierCache, idx: usize) -> &'a Array3<f64> {
        match idx {
            0 => &cache.t1,
            1 => &cache.t2,
            2 => &cache.t3,
            _ => &cache.t4,
        }
    }

    pub fn zero_grads(&self) -> Classifier {
        Classifier {
            cfg: self.cfg.clone(),
            conv1: self.conv1.zero_grads(),
            conv2: self.conv2.zero_grads(),
            conv3: self.conv3.zero_grads(),
            conv4: self.conv4.zero_grads(),
            head: self.head.zero_grads(),
            train_accuracy: 0.0,
            test_accuracy: 0.0,
        }
    }

    pub fn params(&self) -> Vec<(String, ParamView<'_, f64>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("conv3", &self.conv3),
            ("conv4", &self.conv4),
        ] {
            out.push((format!("{name}.weight"), ParamView::D2(&conv.weight)));
            out.push((format!("{name}.bias"), ParamView::D1(&conv.bias)));
        }
        out.push(("head.weight".into(), ParamView::D2(&self.head.weight)));
        out.push(("head.bias".into(), ParamView::D1(&self.head.bias)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamViewMut<'_, f64>)> {
        let mut out = Vec::new();
        let Classifier {
            conv1,
            conv2,
            conv3,
            conv4,
            head,
            ..
        } = self;
        for (name, conv) in [
            ("conv1", conv1),
            ("conv2", conv2),
            ("conv3", conv3),
            ("conv4", conv4),
        ] {
            out.push((format!("{name}.weight"), ParamViewMut::D2(&mut conv.weight)));
            out.push((format!("{name}.bias"), ParamViewMut::D1(&mut conv.bias)));
        }
        out.push(("head.weight".into(), ParamViewMut::D2(&mut head.weight)));
        out.push(("head.bias".into(), ParamViewMut::D1(&mut head.bias)));
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        crate::nn::flatten_params(&self.params())
    }

    pub fn assign_flat(&mut self, data: &[f64]) {
        crate::nn::assign_from_flat(self.params_mut(), data);
    }
}

/// Convert an f32 image to the classifier's f64 input format.
pub fn to_f64_image(x: &Image) -> Array3<f64> {
    x.mapv(|v| v as f64)
}

/// Argmax label plus raw logits. Deterministic.
pub fn classify(clf: &Classifier, x: &Image) -> Result<(usize, Array1<f64>)> {
    let (h, w, ch) = x.dim();
    if h != clf.cfg.image_size || w != clf.cfg.image_size || ch != clf.cfg.in_channels {
        return Err(Error::contract(format!(
            "classify: expected {0}x{0}x{1} input, got {h}x{w}x{ch}",
            clf.cfg.image_size, clf.cfg.in_channels
        )));
    }
    let (logits, _) = clf.forward(&to_f64_image(x));
    Ok((argmax(&logits), logits))
}

pub fn argmax(logits: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

/// Raw activations at the requested taps, in the given order.
pub fn features(clf: &Classifier, x: &Image, layers: &[&str]) -> Result<Vec<Array3<f64>>> {
    let idxs = tap_indices(layers)?;
    if idxs.is_empty() {
        return Ok(vec![]);
    }
    let (_, cache) = clf.forward(&to_f64_image(x));
    Ok(idxs
        .iter()
        .map(|&i| clf.tap_output(&cache, i).clone())
        .collect())
}

pub fn tap_indices(layers: &[&str]) -> Result<Vec<usize>> {
    layers
        .iter()
        .map(|l| {
            TAP_NAMES
                .iter()
                .position(|t| t == l)
                .ok_or_else(|| Error::contract(format!("unknown feature layer '{l}'")))
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassifierTrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Cross-entropy training with Adam. `test` supplies the recorded held-out
/// accuracy (falls back to train accuracy when absent).
pub fn train_classifier(
    train: &Dataset,
    test: Option<&Dataset>,
    epochs: usize,
    seed: u64,
) -> Result<(Classifier, ClassifierTrainReport)> {
    if train.is_empty() {
        return Err(Error::contract("train_classifier: empty dataset"));
    }
    let (h, _, ch) = train.images[0].dim();
    let cfg = ClassifierConfig {
        in_channels: ch,
        num_classes: train.num_classes(),
        image_size: h,
        seed,
    };
    let mut clf = Classifier::new(cfg);
    let n_params = clf.flat_params().len();
    let mut opt = Adam::<f64>::new(n_params, 1e-3);
    let mut rng = rng_for(seed, "classifier-train");
    let batch = 32usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::new();

    let images64: Vec<Array3<f64>> = train.images.iter().map(to_f64_image).collect();
    for _epoch in 0..epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            let mut grads = clf.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (logits, cache) = clf.forward(&images64[i]);
                let (loss, dlogits) = softmax_cross_entropy(&logits, train.labels[i]);
                batch_loss += loss;
                let scale = 1.0 / chunk.len() as f64;
                let dlogits = dlogits.mapv(|v| v * scale);
                let _ = clf.backward(&cache, &dlogits, None, Some(&mut grads));
            }
            let gflat = grads.flat_params();
            let mut pflat = clf.flat_params();
            opt.step(&mut pflat, &gflat);
            clf.assign_flat(&pflat);
            epoch_loss += batch_loss;
            seen += chunk.len();
        }
        epoch_losses.push(epoch_loss / seen.max(1) as f64);
    }

    clf.train_accuracy = accuracy(&clf, train);
    clf.test_accuracy = match test {
        Some(t) => accuracy(&clf, t),
        None => clf.train_accuracy,
    };
    let report = ClassifierTrainReport {
        epoch_losses,
        train_accuracy: clf.train_accuracy,
        test_accuracy: clf.test_accuracy,
    };
    Ok((clf, report))
}

pub fn accuracy(clf: &Classifier, ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (img, &label) in ds.images.iter().zip(ds.labels.iter()) {
        let (pred, _) = classify(clf, img).expect("dataset image shape");
        if pred == label {
            correct += 1;
        }
    }
    correct as f64 / ds.len() as f64
}

/// Deterministic Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha12Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

// -- persistence --------------------------------------------------------------

use crate::data_io::{Checkpoint, CheckpointKind};
use std::collections::BTreeMap;

pub fn classifier_to_checkpoint(clf: &Classifier) -> Checkpoint {
    let mut parameters = BTreeMap::new();
    for (name, view) in clf.params() {
        parameters.insert(name, view.to_f64_dyn());
    }
    let mut metadata = BTreeMap::new();
    metadata.insert(
        "config".to_string(),
        serde_json::to_string(&clf.cfg).unwrap(),
    );
    metadata.insert("train_accuracy".into(), format!("{}", clf.train_accuracy));
    metadata.insert("test_accuracy".into(), format!("{}", clf.test_accuracy));
    Checkpoint {
        kind: CheckpointKind::Classifier,
        parameters,
        metadata,
    }
}

pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<Classifier> {
    if ckpt.kind != CheckpointKind::Classifier {
        return Err(Error::format("checkpoint kind is not classifier"));
    }
    let cfg: ClassifierConfig = serde_json::from_str(
        ckpt.metadata
            .get("config")
            .ok_or_else(|| Error::format("classifier checkpoint missing config"))?,
    )
    .map_err(|e| Error::format(format!("bad classifier config: {e}")))?;
    let mut clf = Classifier::new(cfg);
    crate::nn::load_named(clf.params_mut(), &ckpt.parameters).map_err(Error::Format)?;
    clf.train_accuracy = ckpt
        .metadata
        .get("train_accuracy")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    clf.test_accuracy = ckpt
        .metadata
        .get("test_accuracy")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    Ok(clf)
}

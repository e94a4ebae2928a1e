use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    /// Hidden layer widths (MLP only).
    pub hidden_dims: Vec<usize>,
    /// L2 penalty `l2_weight / (2 n) * ||W||^2` on weight matrices.
    pub l2_weight: f64,
    pub learning_rate: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn logreg() -> Self {
        Self {
            kind: ClassifierKind::Logreg,
            hidden_dims: Vec::new(),
            l2_weight: 1.0,
            learning_rate: 1e-3,
            max_iter: 500,
            seed: 0,
        }
    }

    pub fn mlp() -> Self {
        Self {
            kind: ClassifierKind::Mlp,
            hidden_dims: vec![100],
            ..Self::logreg()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be >= 1"));
        }
        if !(self.l2_weight >= 0.0) {
            return Err(invalid("l2_weight must be >= 0"));
        }
        if self.kind == ClassifierKind::Mlp && self.hidden_dims.contains(&0) {
            return Err(invalid("hidden layers must have at least one unit"));
        }
        Ok(())
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::logreg()
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Adam moment estimates for one layer.
#[derive(Debug, Clone)]
struct Moments {
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Softmax classifier over standardized features, optionally with ReLU hidden layers.
#[derive(Debug, Clone)]
pub struct Classifier {
    classes: Vec<u32>,
    mean: Array1<f64>,
    scale: Array1<f64>,
    layers: Vec<Dense>,
}

impl Classifier {
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Class probabilities, one row per sample and one column per entry of [`Self::classes`].
    pub fn predict_proba(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        let x = (&features - &self.mean) / &self.scale;
        let (_, mut out) = forward(&self.layers, x);
        softmax_rows(&mut out);
        out
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Vec<u32> {
        self.predict_proba(features)
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                self.classes[best]
            })
            .collect()
    }
}

/// Full-batch Adam on mean cross-entropy plus the L2 penalty. Deterministic given the seed.
pub fn train_classifier(
    features: ArrayView2<'_, f64>,
    labels: &[u32],
    config: &ClassifierConfig,
) -> Result<Classifier> {
    config.validate()?;
    let (n, d) = features.dim();
    if n != labels.len() {
        return Err(invalid(format!("{n} feature rows but {} labels", labels.len())));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(invalid("features must be finite"));
    }
    let classes: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(invalid("attacker training needs at least two distinct labels"));
    }
    let k = classes.len();

    let mean = features.mean_axis(Axis(0)).expect("nonempty");
    let scale = features
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let x = (&features - &mean) / &scale;
    let mut y = Array2::<f64>::zeros((n, k));
    for (i, l) in labels.iter().enumerate() {
        let c = classes.binary_search(l).expect("label drawn from classes");
        y[[i, c]] = 1.0;
    }

    let widths: Vec<usize> = match config.kind {
        ClassifierKind::Logreg => vec![d, k],
        ClassifierKind::Mlp => std::iter::once(d)
            .chain(config.hidden_dims.iter().copied())
            .chain(std::iter::once(k))
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers: Vec<Dense> = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = match config.kind {
                ClassifierKind::Logreg => Array2::zeros((fan_in, fan_out)),
                ClassifierKind::Mlp => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound))
                }
            };
            Dense {
                w: weights,
                b: Array1::zeros(fan_out),
            }
        })
        .collect();
    let mut moments: Vec<Moments> = layers
        .iter()
        .map(|l| Moments {
            mw: Array2::zeros(l.w.raw_dim()),
            vw: Array2::zeros(l.w.raw_dim()),
            mb: Array1::zeros(l.b.raw_dim()),
            vb: Array1::zeros(l.b.raw_dim()),
        })
        .collect();

    let penalty = config.l2_weight / n as f64;
    for t in 1..=config.max_iter {
        let (activations, mut out) = forward(&layers, x.clone());
        softmax_rows(&mut out);
        let mut delta = (out - &y) / n as f64;
        let lr_t = config.learning_rate * (1.0 - BETA2.powi(t as i32)).sqrt()
            / (1.0 - BETA1.powi(t as i32));
        for li in (0..layers.len()).rev() {
            let input = &activations[li];
            let gw = input.t().dot(&delta) + &(&layers[li].w * penalty);
            let gb = delta.sum_axis(Axis(0));
            if li > 0 {
                let mut back = delta.dot(&layers[li].w.t());
                // ReLU derivative: the stored activation is positive exactly where the unit was active.
                back.zip_mut_with(&activations[li], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
            let m = &mut moments[li];
            adam(&mut layers[li].w, &gw, &mut m.mw, &mut m.vw, lr_t);
            adam(&mut layers[li].b, &gb, &mut m.mb, &mut m.vb, lr_t);
        }
    }

    Ok(Classifier {
        classes,
        mean,
        scale,
        layers,
    })
}

fn adam<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr_t: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr_t * *m / (v.sqrt() + ADAM_EPS);
        });
}

/// Returns the input of every layer and the final logits.
fn forward(layers: &[Dense], x: Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let mut z = h.dot(&layer.w) + &layer.b;
        if i + 1 < layers.len() {
            z.mapv_inplace(|v| v.max(0.0));
        }
        inputs.push(h);
        h = z;
    }
    (inputs, h)
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row /= s;
    }
}

//! Base representation lookups: collaborative embeddings, the uniform content
//! embedding and the encoded annotation.

use rand::Rng;

use crate::dataset::{GrayImage, ItemContent};
use crate::error::{check_len, Error, Result};
use crate::layers::{leaky_relu, leaky_relu_grad, Dense, InputGrad};
use crate::linalg::axpy;
use crate::params::{Grads, ParamId, ParamKind, ParamStore, Tensor};

/// Standard deviation used to initialise every embedding table.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

/// A `rows × dim` lookup table with sparse row gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        let id = store.add(name, ParamKind::Table, Tensor::normal(rows, dim, EMBEDDING_INIT_STD, rng));
        Self { id, rows, dim }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Self {
        let id = store.add(name, ParamKind::Table, Tensor::zeros(rows, dim));
        Self { id, rows, dim }
    }

    pub fn lookup<'a>(&self, store: &'a ParamStore, row: usize) -> Result<&'a [f64]> {
        if row >= self.rows {
            return Err(Error::Index { index: row, rows: self.rows });
        }
        Ok(store.get(self.id).row(row))
    }

    /// Routes `grad` to the looked-up row only.
    pub fn backward(&self, grads: &mut Grads, row: usize, grad: &[f64]) {
        axpy(1.0, grad, grads.row_mut(self.id, row));
    }
}

/// `p_u`: row `user` of the user table.
pub fn lookup_user<'a>(table: &EmbeddingTable, store: &'a ParamStore, user: usize) -> Result<&'a [f64]> {
    table.lookup(store, user)
}

/// `q_i`: row `item` of the item table.
pub fn lookup_item<'a>(table: &EmbeddingTable, store: &'a ParamStore, item: usize) -> Result<&'a [f64]> {
    table.lookup(store, item)
}

/// `ŝ_i`: mean of the element embeddings, zero for an empty annotation.
pub fn encode_privileged(elements: &[usize], table: &EmbeddingTable, store: &ParamStore) -> Result<Vec<f64>> {
    let mut out = vec![0.0; table.dim];
    if elements.is_empty() {
        return Ok(out);
    }
    for &e in elements {
        if e >= table.rows {
            return Err(Error::Vocabulary { id: e, vocab: table.rows });
        }
        axpy(1.0, store.get(table.id).row(e), &mut out);
    }
    let inv = 1.0 / elements.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

pub fn encode_privileged_backward(elements: &[usize], table: &EmbeddingTable, grads: &mut Grads, grad: &[f64]) {
    if elements.is_empty() {
        return;
    }
    let inv = 1.0 / elements.len() as f64;
    for &e in elements {
        axpy(inv, grad, grads.row_mut(table.id, e));
    }
}

/// Where `e_i` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Stored feature vector, a constant of the graph.
    #[default]
    Precomputed,
    /// Output of the small convolutional encoder over the item image.
    Trainable,
}

#[derive(Clone)]
struct Conv3x3 {
    weight: ParamId,
    bias: ParamId,
    c_in: usize,
    c_out: usize,
}

impl Conv3x3 {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan = c_in * 9;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Dense,
            Tensor::xavier(c_out, fan, rng),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Dense, Tensor::zeros(1, c_out));
        Self { weight, bias, c_in, c_out }
    }

    /// Valid 3×3 convolution of a `c_in × side × side` input.
    fn forward(&self, store: &ParamStore, x: &[f64], side: usize) -> Vec<f64> {
        let o_side = side - 2;
        let w = &store.get(self.weight).data;
        let b = &store.get(self.bias).data;
        let mut out = vec![0.0; self.c_out * o_side * o_side];
        for o in 0..self.c_out {
            for y in 0..o_side {
                for xx in 0..o_side {
                    let mut acc = b[o];
                    for c in 0..self.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += w[((o * self.c_in + c) * 3 + ky) * 3 + kx]
                                    * x[(c * side + y + ky) * side + xx + kx];
                            }
                        }
                    }
                    out[(o * o_side + y) * o_side + xx] = acc;
                }
            }
        }
        out
    }

    fn backward(&self, store: &ParamStore, x: &[f64], side: usize, gout: &[f64], grads: &mut Grads) -> Vec<f64> {
        let o_side = side - 2;
        let w = &store.get(self.weight).data;
        let mut dx = vec![0.0; x.len()];
        {
            let db = grads.dense_mut(self.bias);
            for o in 0..self.c_out {
                db[o] += gout[o * o_side * o_side..(o + 1) * o_side * o_side].iter().sum::<f64>();
            }
        }
        let dw = grads.dense_mut(self.weight);
        for o in 0..self.c_out {
            for y in 0..o_side {
                for xx in 0..o_side {
                    let g = gout[(o * o_side + y) * o_side + xx];
                    for c in 0..self.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wi = ((o * self.c_in + c) * 3 + ky) * 3 + kx;
                                let xi = (c * side + y + ky) * side + xx + kx;
                                dw[wi] += g * x[xi];
                                dx[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Two valid 3×3 convolutions with LeakyReLU, then a dense projection to the
/// uniform embedding width.
#[derive(Clone)]
pub struct ConvEncoder {
    conv1: Conv3x3,
    conv2: Conv3x3,
    head: Dense,
    pub side: usize,
    pub out_dim: usize,
}

impl std::fmt::Debug for ConvEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvEncoder")
            .field("side", &self.side)
            .field("out_dim", &self.out_dim)
            .finish()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
}

impl ConvEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        side: usize,
        channels: (usize, usize),
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(side >= 5, "encoder input side must be at least 5");
        let conv1 = Conv3x3::new(store, &format!("{name}.conv1"), 1, channels.0, rng);
        let conv2 = Conv3x3::new(store, &format!("{name}.conv2"), channels.0, channels.1, rng);
        let flat = channels.1 * (side - 4) * (side - 4);
        let head = Dense::new(store, &format!("{name}.head"), flat, out_dim, true, rng);
        Self { conv1, conv2, head, side, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, image: &GrayImage) -> Result<(Vec<f64>, EncoderCache)> {
        if image.side != self.side {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} images, got {}x{}",
                self.side, self.side, image.side, image.side
            )));
        }
        check_len("image pixels", image.pixels.len(), self.side * self.side)?;
        let pre1 = self.conv1.forward(store, &image.pixels, self.side);
        let act1: Vec<f64> = pre1.iter().map(|&z| leaky_relu(z)).collect();
        let pre2 = self.conv2.forward(store, &act1, self.side - 2);
        let act2: Vec<f64> = pre2.iter().map(|&z| leaky_relu(z)).collect();
        let out = self.head.forward(store, &act2);
        Ok((
            out,
            EncoderCache {
                input: image.pixels.clone(),
                pre1,
                act1,
                pre2,
                act2,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &EncoderCache, grad_out: &[f64], grads: &mut Grads) {
        let g_act2 = self.head.backward(store, &cache.act2, grad_out, grads, InputGrad::All);
        let g_pre2: Vec<f64> = g_act2
            .iter()
            .zip(&cache.pre2)
            .map(|(g, &z)| g * leaky_relu_grad(z))
            .collect();
        let g_act1 = self.conv2.backward(store, &cache.act1, self.side - 2, &g_pre2, grads);
        let g_pre1: Vec<f64> = g_act1
            .iter()
            .zip(&cache.pre1)
            .map(|(g, &z)| g * leaky_relu_grad(z))
            .collect();
        self.conv1.backward(store, &cache.input, self.side, &g_pre1, grads);
    }
}

/// `e_i` for one item. Precomputed mode returns the stored feature and no
/// cache; trainable mode runs the encoder and returns its cache.
pub fn encode_uniform(
    item: usize,
    content: &ItemContent,
    mode: EncoderMode,
    encoder: Option<&ConvEncoder>,
    store: &ParamStore,
) -> Result<(Vec<f64>, Option<EncoderCache>)> {
    match mode {
        EncoderMode::Precomputed => {
            let f = content.feature.as_ref().ok_or(Error::Content(item))?;
            Ok((f.clone(), None))
        }
        EncoderMode::Trainable => {
            let enc = encoder.ok_or_else(|| Error::Config("trainable mode without an encoder".into()))?;
            let image = content.image.as_ref().ok_or(Error::Content(item))?;
            let (e, cache) = enc.forward(store, image)?;
            Ok((e, Some(cache)))
        }
    }
}

//! Seeded random encoder parameters and the image/text encoders.

use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, TextFeatures, VisualFeatures};
use crate::error::{Error, Result};

pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// One attention head's projections, each `d x d_head`.
pub(crate) struct HeadParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

pub(crate) struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Output projection applied to the concatenated head outputs, `d x d`.
    pub w_out: Array2<f64>,
}

/// Fixed random multimodal encoder. All parameters, and the embedding of any
/// token, are pure functions of the config seed.
pub struct ToyEncoder {
    cfg: ModelConfig,
    /// Visual projection `d x 5`, applied to `[r, g, b, cy, cx]`.
    image_proj: Array2<f64>,
    pub(crate) layers: Vec<LayerParams>,
    /// Readout vector `w`, length `d`.
    pub(crate) readout: Array1<f64>,
}

/// FNV-1a, used to derive independent named parameter streams from one seed.
fn fnv1a(tag: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag))
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * sigma
    })
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * sigma
    })
}

impl ToyEncoder {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let dh = cfg.head_dim();
        // Query/key projections use unit-variance entries so that attention
        // logits respond decisively to content differences between cells;
        // value/output projections shrink with width to keep hidden-state
        // magnitudes stable across layers. The parameters are never trained,
        // so these scales are part of the model definition.
        let sigma_qk: f64 = std::env::var("CAL_QK")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1.0);
        let sigma = 1.0 / (d as f64).sqrt();

        let image_proj = normal_matrix(&mut stream(cfg.seed, "image-proj"), d, 5, 1.0);
        let layers = (0..cfg.layers)
            .map(|l| {
                let heads = (0..cfg.n_heads)
                    .map(|h| {
                        if cfg.identity_projections {
                            HeadParams {
                                w_q: Array2::eye(d),
                                w_k: Array2::eye(d),
                                w_v: Array2::eye(d),
                            }
                        } else {
                            HeadParams {
                                w_q: normal_matrix(
                                    &mut stream(cfg.seed, &format!("wq:{l}:{h}")),
                                    d,
                                    dh,
                                    sigma_qk,
                                ),
                                w_k: normal_matrix(
                                    &mut stream(cfg.seed, &format!("wk:{l}:{h}")),
                                    d,
                                    dh,
                                    sigma_qk,
                                ),
                                w_v: normal_matrix(
                                    &mut stream(cfg.seed, &format!("wv:{l}:{h}")),
                                    d,
                                    dh,
                                    sigma,
                                ),
                            }
                        }
                    })
                    .collect();
                let w_out = if cfg.identity_projections {
                    Array2::eye(d)
                } else {
                    normal_matrix(&mut stream(cfg.seed, &format!("wo:{l}")), d, d, sigma)
                };
                LayerParams { heads, w_out }
            })
            .collect();
        let readout = normal_vector(&mut stream(cfg.seed, "readout"), d, 1.0);

        Ok(ToyEncoder {
            cfg,
            image_proj,
            layers,
            readout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Deterministic embedding of a token string.
    pub fn token_embedding(&self, token: &str) -> Array1<f64> {
        let mut rng = stream(self.cfg.seed, &format!("token:{token}"));
        normal_vector(&mut rng, self.cfg.dim, 1.0)
    }

    /// Cell-pool the image to the configured grid and project each cell's
    /// mean color plus its center position through a fixed linear map.
    ///
    /// Cell `(gy, gx)` covers pixel rows `[gy*h/rows, (gy+1)*h/rows)` and the
    /// analogous columns; the projected vector is
    /// `[r̄, ḡ, b̄, cy, cx]` with colors in `[-0.5, 0.5]` and centers damped
    /// to `[-0.125, 0.125]` so cell content, not cell position, dominates
    /// attention — a weak positional signal, as in content-driven attention
    /// generally.
    pub fn encode_image(&self, image: &RgbImage) -> Result<VisualFeatures> {
        let (w, h) = image.dimensions();
        let (rows, cols) = self.cfg.grid;
        if w == 0 || h == 0 {
            return Err(Error::invalid("empty image"));
        }
        if (h as usize) < rows || (w as usize) < cols {
            return Err(Error::invalid(format!(
                "image {w}x{h} smaller than feature grid {cols}x{rows}"
            )));
        }
        let mut features = Array2::zeros((rows * cols, self.cfg.dim));
        for gy in 0..rows {
            for gx in 0..cols {
                let y0 = gy * h as usize / rows;
                let y1 = (gy + 1) * h as usize / rows;
                let x0 = gx * w as usize / cols;
                let x1 = (gx + 1) * w as usize / cols;
                let mut sum = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get_pixel(x as u32, y as u32);
                        for c in 0..3 {
                            sum[c] += f64::from(p.0[c]);
                        }
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let u = [
                    sum[0] / count / 255.0 - 0.5,
                    sum[1] / count / 255.0 - 0.5,
                    sum[2] / count / 255.0 - 0.5,
                    0.25 * ((gy as f64 + 0.5) / rows as f64 - 0.5),
                    0.25 * ((gx as f64 + 0.5) / cols as f64 - 0.5),
                ];
                for i in 0..self.cfg.dim {
                    let mut v = 0.0;
                    for (j, uj) in u.iter().enumerate() {
                        v += self.image_proj[(i, j)] * uj;
                    }
                    features[(gy * cols + gx, i)] = v;
                }
            }
        }
        Ok(VisualFeatures {
            features,
            grid: (rows, cols),
        })
    }

    /// Embed a token sequence (marker tokens included by the caller).
    pub fn encode_text(&self, tokens: &[String]) -> Result<TextFeatures> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let mut features = Array2::zeros((tokens.len(), self.cfg.dim));
        for (t, token) in tokens.iter().enumerate() {
            features.row_mut(t).assign(&self.token_embedding(token));
        }
        Ok(TextFeatures {
            features,
            tokens: tokens.to_vec(),
        })
    }

    /// Test support: make every head of every layer a copy of head 0 and tile
    /// the output projection to match, so per-head quantities coincide and the
    /// head average collapses to any single head.
    #[doc(hidden)]
    pub fn tie_heads(&mut self) {
        let dh = self.cfg.head_dim();
        for layer in &mut self.layers {
            let first_q = layer.heads[0].w_q.clone();
            let first_k = layer.heads[0].w_k.clone();
            let first_v = layer.heads[0].w_v.clone();
            for head in &mut layer.heads[1..] {
                head.w_q = first_q.clone();
                head.w_k = first_k.clone();
                head.w_v = first_v.clone();
            }
            let first_rows = layer.w_out.slice(ndarray::s![0..dh, ..]).to_owned();
            for h in 1..self.cfg.n_heads {
                layer
                    .w_out
                    .slice_mut(ndarray::s![h * dh..(h + 1) * dh, ..])
                    .assign(&first_rows);
            }
        }
    }
}

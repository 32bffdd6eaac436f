//! The small transformer used as both teacher velocity model and student
//! backbone.
//!
//! Clips enter as `[frames, channels]` with one token per frame. Conditioning
//! follows the adaptive-norm pattern: a sinusoidal embedding of the timestep
//! plus a category embedding feed per-block scale/shift heads that modulate
//! the normalised activations. A reserved null category row stands in for
//! dropped conditioning.

use crate::error::{Error, Result};
use crate::exec::{EvalExec, Executor};
use crate::rng::DeterministicRng;
use crate::tensor::{ParamSet, Tensor};
use std::collections::BTreeMap;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Frames per clip (tokens per sequence).
    pub frames: usize,
    /// Coordinates per frame.
    pub channels: usize,
    /// Hidden width.
    pub width: usize,
    /// Transformer blocks.
    pub blocks: usize,
    /// Attention heads; must divide `width`.
    pub heads: usize,
    /// Number of sinusoidal frequencies in the timestep embedding.
    pub time_feats: usize,
    /// Real categories; the embedding table holds one extra null row.
    pub categories: usize,
    /// MLP expansion factor.
    pub mlp_mult: usize,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        Self {
            frames: 16,
            channels: 4,
            width: 32,
            blocks: 2,
            heads: 4,
            time_feats: 6,
            categories: 3,
            mlp_mult: 2,
        }
    }

    /// Index of the reserved null category row.
    pub fn null_category(&self) -> usize {
        self.categories
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.frames == 0 || self.channels == 0 || self.blocks == 0 || self.time_feats == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    pub params: ParamSet,
    freqs: Vec<f64>,
}

impl ToyTransformer {
    /// Seeded initialisation. Output heads, modulation heads, and second MLP
    /// layers start at zero so the network is the zero function at step 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = DeterministicRng::derive(seed, &[0x6d6f64656c]);
        let mut params = ParamSet::new();
        let w = config.width;
        let dh = config.head_dim();
        let c = config.channels;
        let k2 = 2 * config.time_feats;

        let mut normal = |shape: &[usize], std: f64| -> Tensor {
            let t = rng.normal_tensor(shape);
            crate::tensor::scale(&t, std)
        };

        params.insert("embed.w", normal(&[c, w], 1.0 / (c as f64).sqrt()));
        params.insert("embed.b", Tensor::zeros(&[1, w]));
        params.insert("pos.table", normal(&[config.frames, w], 0.3));
        params.insert("time.w", normal(&[k2, w], 1.0 / (k2 as f64).sqrt()));
        params.insert("time.b", Tensor::zeros(&[1, w]));
        params.insert("cat.table", normal(&[config.categories + 1, w], 0.2));

        for b in 0..config.blocks {
            for h in 0..config.heads {
                params.insert(format!("blk{b}.attn.q{h}.w"), normal(&[w, dh], 1.0 / (w as f64).sqrt()));
                params.insert(format!("blk{b}.attn.k{h}.w"), normal(&[w, dh], 1.0 / (w as f64).sqrt()));
                params.insert(format!("blk{b}.attn.v{h}.w"), normal(&[w, dh], 1.0 / (w as f64).sqrt()));
                params.insert(format!("blk{b}.attn.o{h}.w"), Tensor::zeros(&[dh, w]));
            }
            for part in ["mod_attn", "mod_mlp"] {
                params.insert(format!("blk{b}.{part}.scale.w"), Tensor::zeros(&[w, w]));
                params.insert(format!("blk{b}.{part}.scale.b"), Tensor::zeros(&[1, w]));
                params.insert(format!("blk{b}.{part}.shift.w"), Tensor::zeros(&[w, w]));
                params.insert(format!("blk{b}.{part}.shift.b"), Tensor::zeros(&[1, w]));
            }
            let m = w * config.mlp_mult;
            params.insert(format!("blk{b}.mlp.w1"), normal(&[w, m], 1.0 / (w as f64).sqrt()));
            params.insert(format!("blk{b}.mlp.b1"), Tensor::zeros(&[1, m]));
            params.insert(format!("blk{b}.mlp.w2"), Tensor::zeros(&[m, w]));
            params.insert(format!("blk{b}.mlp.b2"), Tensor::zeros(&[1, w]));
        }
        params.insert("skip.w", Tensor::zeros(&[c, c]));
        params.insert("skip.gate.w", Tensor::zeros(&[w, c]));
        params.insert("skip.gate.b", Tensor::zeros(&[1, c]));
        params.insert("mod_out.scale.w", Tensor::zeros(&[w, w]));
        params.insert("mod_out.scale.b", Tensor::zeros(&[1, w]));
        params.insert("mod_out.shift.w", Tensor::zeros(&[w, w]));
        params.insert("mod_out.shift.b", Tensor::zeros(&[1, w]));
        params.insert("out.w", Tensor::zeros(&[w, c]));
        params.insert("out.b", Tensor::zeros(&[1, c]));

        let freqs = time_frequencies(config.time_feats);
        Ok(Self { config, params, freqs })
    }

    /// Same architecture, different parameter values.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if !self.params.same_structure(&params) {
            return Err(Error::StructureMismatch("model parameter structure".into()));
        }
        Ok(Self { config: self.config.clone(), params, freqs: self.freqs.clone() })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Generic forward pass; `params` must hold every leaf of this model,
    /// already lifted into the executor.
    pub fn forward<E: Executor>(
        &self,
        ex: &mut E,
        params: &BTreeMap<String, E::V>,
        x: &E::V,
        t: &E::V,
        category: usize,
    ) -> Result<E::V> {
        let p = |name: &str| -> Result<&E::V> {
            params
                .get(name)
                .ok_or_else(|| Error::StructureMismatch(format!("missing lifted leaf `{name}`")))
        };
        let cfg = &self.config;
        if category > cfg.null_category() {
            return Err(Error::Config(format!(
                "category index {category} out of range (null index is {})",
                cfg.null_category()
            )));
        }

        let frames = ex.value(x).rows();
        let mut h = ex.matmul(x, p("embed.w")?)?;
        h = ex.add_row(&h, p("embed.b")?)?;
        let pos = ex.slice_rows(p("pos.table")?, frames)?;
        h = ex.add(&h, &pos)?;

        let tf = ex.time_features(t, &self.freqs)?;
        let temb = ex.matmul(&tf, p("time.w")?)?;
        let temb = ex.add_row(&temb, p("time.b")?)?;
        let cemb = ex.gather_row(p("cat.table")?, category)?;
        let cond = ex.add(&temb, &cemb)?;
        let cond = ex.silu(&cond);
        let ones = ex.constant(Tensor::full(&[1, cfg.width], 1.0));

        for b in 0..cfg.blocks {
            let modulated = |ex: &mut E, h: &E::V, part: &str| -> Result<E::V> {
                let scale = ex.matmul(&cond, p(&format!("blk{b}.{part}.scale.w"))?)?;
                let scale = ex.add_row(&scale, p(&format!("blk{b}.{part}.scale.b"))?)?;
                let shift = ex.matmul(&cond, p(&format!("blk{b}.{part}.shift.w"))?)?;
                let shift = ex.add_row(&shift, p(&format!("blk{b}.{part}.shift.b"))?)?;
                let normed = ex.rms_norm(h, RMS_EPS);
                let gain = ex.add(&ones, &scale)?;
                let out = ex.mul_row(&normed, &gain)?;
                ex.add_row(&out, &shift)
            };

            let a_in = modulated(ex, &h, "mod_attn")?;
            let mut attn_out: Option<E::V> = None;
            for head in 0..cfg.heads {
                let q = ex.matmul(&a_in, p(&format!("blk{b}.attn.q{head}.w"))?)?;
                let k = ex.matmul(&a_in, p(&format!("blk{b}.attn.k{head}.w"))?)?;
                let v = ex.matmul(&a_in, p(&format!("blk{b}.attn.v{head}.w"))?)?;
                let o = ex.attention(&q, &k, &v)?;
                let o = ex.matmul(&o, p(&format!("blk{b}.attn.o{head}.w"))?)?;
                attn_out = Some(match attn_out {
                    None => o,
                    Some(acc) => ex.add(&acc, &o)?,
                });
            }
            h = ex.add(&h, &attn_out.expect("heads >= 1"))?;

            let m_in = modulated(ex, &h, "mod_mlp")?;
            let m = ex.matmul(&m_in, p(&format!("blk{b}.mlp.w1"))?)?;
            let m = ex.add_row(&m, p(&format!("blk{b}.mlp.b1"))?)?;
            let m = ex.silu(&m);
            let m = ex.matmul(&m, p(&format!("blk{b}.mlp.w2"))?)?;
            let m = ex.add_row(&m, p(&format!("blk{b}.mlp.b2"))?)?;
            h = ex.add(&h, &m)?;
        }

        let scale = ex.matmul(&cond, p("mod_out.scale.w")?)?;
        let scale = ex.add_row(&scale, p("mod_out.scale.b")?)?;
        let shift = ex.matmul(&cond, p("mod_out.shift.w")?)?;
        let shift = ex.add_row(&shift, p("mod_out.shift.b")?)?;
        let out = ex.rms_norm(&h, RMS_EPS);
        let gain = ex.add(&ones, &scale)?;
        let out = ex.mul_row(&out, &gain)?;
        let out = ex.add_row(&out, &shift)?;
        let out = ex.matmul(&out, p("out.w")?)?;
        let out = ex.add_row(&out, p("out.b")?)?;
        // Time-gated linear skip from the input; velocity targets scale
        // linearly with the state, which the normalised pathway cannot carry.
        let skip = ex.matmul(x, p("skip.w")?)?;
        let gate = ex.matmul(&cond, p("skip.gate.w")?)?;
        let gate = ex.add_row(&gate, p("skip.gate.b")?)?;
        let ones_c = ex.constant(Tensor::full(&[1, cfg.channels], 1.0));
        let gate = ex.add(&ones_c, &gate)?;
        let skip = ex.mul_row(&skip, &gate)?;
        ex.add(&out, &skip)
    }

    /// Plain evaluation with this model's own parameters.
    pub fn eval(&self, x: &Tensor, t: f64, category: usize) -> Result<Tensor> {
        self.eval_with(&self.params, x, t, category)
    }

    /// Plain evaluation with an explicit parameter set (e.g. an EMA copy).
    pub fn eval_with(&self, params: &ParamSet, x: &Tensor, t: f64, category: usize) -> Result<Tensor> {
        let mut ex = EvalExec;
        let lifted = ex.lift(params);
        let tv = Tensor::scalar(t);
        self.forward(&mut ex, &lifted, &x.clone(), &tv, category)
    }
}

fn time_frequencies(k: usize) -> Vec<f64> {
    (0..k).map(|i| (1u64 << i) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{
        finite_diff_directional, jvp_eval, rel_err, with_precision, DualTensor, Precision,
    };

    fn tiny() -> ToyTransformer {
        let cfg = ModelConfig {
            frames: 4,
            channels: 3,
            width: 8,
            blocks: 2,
            heads: 2,
            time_feats: 4,
            categories: 3,
            mlp_mult: 2,
        };
        ToyTransformer::init(cfg, 99).unwrap()
    }

    #[test]
    fn zero_initialised_output() {
        let model = tiny();
        let mut rng = DeterministicRng::seed_from(1);
        let x = rng.normal_tensor(&[4, 3]);
        let y = model.eval(&x, 0.5, 0).unwrap();
        assert_eq!(y, Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let mut model = tiny();
        // Perturb away from the zero init so the output is nontrivial.
        let mut rng = DeterministicRng::seed_from(2);
        let noise = ParamSet::from_iter(
            model
                .params
                .iter()
                .map(|(n, t)| (n.clone(), rng.normal_tensor(t.shape())))
                .collect::<Vec<_>>(),
        );
        model.params = model.params.axpy(0.05, &noise).unwrap();

        let x = rng.normal_tensor(&[4, 3]);
        let a = model.eval(&x, 0.3, 1).unwrap();
        let b = model.eval(&x, 0.3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 3]);
        // Variable sequence length is allowed.
        let short = rng.normal_tensor(&[2, 3]);
        assert_eq!(model.eval(&short, 0.3, 1).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn category_out_of_range_is_an_error() {
        let model = tiny();
        let x = Tensor::zeros(&[4, 3]);
        assert!(model.eval(&x, 0.1, 5).is_err());
        // The null row itself is valid.
        assert!(model.eval(&x, 0.1, 3).is_ok());
    }

    #[test]
    fn transformer_jvp_matches_finite_differences() {
        with_precision(Precision::Double, || {
            let mut model = tiny();
            let mut rng = DeterministicRng::seed_from(3);
            let noise = ParamSet::from_iter(
                model
                    .params
                    .iter()
                    .map(|(n, t)| (n.clone(), rng.normal_tensor(t.shape())))
                    .collect::<Vec<_>>(),
            );
            model.params = model.params.axpy(0.2, &noise).unwrap();

            let x = rng.normal_tensor(&[4, 3]);
            let v = rng.normal_tensor(&[4, 3]);
            let t = 0.4;

            let (_, tangent) = jvp_eval(
                |seed| {
                    let mut ex = crate::exec::DualExec;
                    let lifted = ex.lift(&model.params);
                    let tv = DualTensor::constant(Tensor::scalar(t));
                    model.forward(&mut ex, &lifted, seed, &tv, 1)
                },
                &x,
                &v,
            )
            .unwrap();

            let fd = finite_diff_directional(|y| model.eval(y, t, 1), &x, &v, 1e-4).unwrap();
            let e = rel_err(&tangent, &fd);
            assert!(e <= 1e-4, "rel err {e}");
        });
    }
}

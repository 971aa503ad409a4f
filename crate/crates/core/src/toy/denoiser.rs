//! A small pixel-space attention denoiser.
//!
//! Two token resolutions: an 8x8 grid carrying self-attention (whose maps
//! feed inter-patch structure refinement) and a 4x4 grid carrying text
//! cross-attention (whose maps feed word saliency). Image conditioning
//! enters as a decoupled cross-attention branch over tokens projected from a
//! joint-space embedding, scaled by a weight and added to the text branch
//! before the output projection — everything downstream of that addition is
//! linear, so the output is exactly affine in the conditioning weight.
//!
//! Single-head attention everywhere keeps captured maps losslessly
//! re-injectable: forcing a pass's own maps reproduces its output bitwise.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::attention::{attention_output, AttentionBundle, AttentionKind, AttentionRecord};
use crate::denoiser::{Denoiser, DenoiserInput, PromptEncoding};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::toy::nn::{
    attn_backward, attn_forward, mean_pool_tokens, mean_pool_tokens_backward,
    nearest_upsample_tokens, nearest_upsample_tokens_backward, patchify, position_embedding_2d,
    tanh_backward, tanh_forward, time_features, unpatchify, Adam, AttnCache, LayerNorm, Linear,
};
use crate::toy::scene::{token_index, NULL_TOKEN, VOCABULARY};

/// Block id of the self-attention site (8x8 token grid).
pub const SELF_ATTENTION_BLOCK: usize = 1;
/// Block id of the text cross-attention site (4x4 token grid).
pub const TEXT_CROSS_BLOCK: usize = 2;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch edge length; the fine token grid is `height / patch` square.
    pub patch: usize,
    pub d_model: usize,
    pub hidden: usize,
    /// Number of conditioning tokens projected from the image embedding.
    pub image_tokens: usize,
    /// Dimension of the joint embedding space feeding image conditioning.
    pub joint_dim: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
            d_model: 32,
            hidden: 64,
            image_tokens: 4,
            joint_dim: 64,
        }
    }
}

impl ToyDenoiserConfig {
    fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::invalid("denoiser expects square latents"));
        }
        if self.patch == 0 || self.height % self.patch != 0 {
            return Err(Error::invalid("patch size must divide the image size"));
        }
        let grid = self.height / self.patch;
        if grid % 2 != 0 {
            return Err(Error::invalid("fine token grid must have even extent"));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::invalid("d_model must be a multiple of 4"));
        }
        if self.channels == 0 || self.image_tokens == 0 || self.joint_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("config dimensions must be positive"));
        }
        Ok(())
    }

    /// Edge length of the self-attention token grid.
    pub fn self_grid(&self) -> usize {
        self.height / self.patch
    }

    /// Edge length of the cross-attention token grid.
    pub fn cross_grid(&self) -> usize {
        self.self_grid() / 2
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// The model. All trainable state is public to the crate for the optimizer
/// and checkpoint code.
#[derive(Debug, Clone)]
pub struct ToyDenoiser<S> {
    pub(crate) cfg: ToyDenoiserConfig,
    pub(crate) token_table: Array2<S>,
    pub(crate) g_token_table: Array2<S>,
    pub(crate) patch_embed: Linear<S>,
    pub(crate) time1: Linear<S>,
    pub(crate) time2: Linear<S>,
    pub(crate) ln_sa: LayerNorm<S>,
    pub(crate) wq1: Linear<S>,
    pub(crate) wk1: Linear<S>,
    pub(crate) wv1: Linear<S>,
    pub(crate) wo1: Linear<S>,
    pub(crate) ln_m1: LayerNorm<S>,
    pub(crate) m1a: Linear<S>,
    pub(crate) m1b: Linear<S>,
    pub(crate) ln_m2: LayerNorm<S>,
    pub(crate) m2a: Linear<S>,
    pub(crate) m2b: Linear<S>,
    pub(crate) ln_ca: LayerNorm<S>,
    pub(crate) wq2: Linear<S>,
    pub(crate) wk_txt: Linear<S>,
    pub(crate) wv_txt: Linear<S>,
    pub(crate) img_proj: Linear<S>,
    pub(crate) wk_img: Linear<S>,
    pub(crate) wv_img: Linear<S>,
    pub(crate) wo2: Linear<S>,
    pub(crate) head: Linear<S>,
    pub(crate) skip_gain: Array1<S>,
    pub(crate) g_skip_gain: Array1<S>,
    pos_fine: Array2<S>,
    pos_coarse: Array2<S>,
}

/// Activations of one forward pass that the backward pass consumes.
pub struct Tape<S> {
    z: LatentGrid<S>,
    x0: Array2<S>,
    tf: Array2<S>,
    t_tanh: Array2<S>,
    n1: Array2<S>,
    c_sa: crate::toy::nn::LayerNormCache<S>,
    q1: Array2<S>,
    k1: Array2<S>,
    v1: Array2<S>,
    cache1: AttnCache<S>,
    attn_used1: Array2<S>,
    n2: Array2<S>,
    c_m1: crate::toy::nn::LayerNormCache<S>,
    ta1: Array2<S>,
    n3: Array2<S>,
    c_m2: crate::toy::nn::LayerNormCache<S>,
    ta2: Array2<S>,
    n4: Array2<S>,
    c_ca: crate::toy::nn::LayerNormCache<S>,
    q2: Array2<S>,
    kt: Array2<S>,
    vt: Array2<S>,
    cache_t: AttnCache<S>,
    image: Option<ImageTape<S>>,
    combined: Array2<S>,
    h6: Array2<S>,
}

struct ImageTape<S> {
    joint: Array1<S>,
    weight: S,
    it: Array2<S>,
    ki: Array2<S>,
    vi: Array2<S>,
    cache_i: AttnCache<S>,
}

impl<S: Scalar> ToyDenoiser<S> {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ToyDenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let d = cfg.d_model;
        let vocab = VOCABULARY.len();
        let token_table = Array2::from_shape_fn((vocab, d), |_| S::from_real(rng.gen_range(-0.1..0.1)));
        let model = Self {
            g_token_table: Array2::zeros((vocab, d)),
            token_table,
            patch_embed: Linear::new(cfg.patch_dim(), d, &mut rng),
            time1: Linear::new(d, d, &mut rng),
            time2: Linear::new(d, d, &mut rng),
            ln_sa: LayerNorm::new(d),
            wq1: Linear::new(d, d, &mut rng),
            wk1: Linear::new(d, d, &mut rng),
            wv1: Linear::new(d, d, &mut rng),
            wo1: Linear::new(d, d, &mut rng),
            ln_m1: LayerNorm::new(d),
            m1a: Linear::new(d, cfg.hidden, &mut rng),
            m1b: Linear::new(cfg.hidden, d, &mut rng),
            ln_m2: LayerNorm::new(d),
            m2a: Linear::new(d, cfg.hidden, &mut rng),
            m2b: Linear::new(cfg.hidden, d, &mut rng),
            ln_ca: LayerNorm::new(d),
            wq2: Linear::new(d, d, &mut rng),
            wk_txt: Linear::new(d, d, &mut rng),
            wv_txt: Linear::new(d, d, &mut rng),
            img_proj: Linear::new(cfg.joint_dim, cfg.image_tokens * d, &mut rng),
            wk_img: Linear::new(d, d, &mut rng),
            wv_img: Linear::new(d, d, &mut rng),
            wo2: Linear::new(d, d, &mut rng),
            head: Linear::new(d, cfg.patch_dim(), &mut rng),
            skip_gain: Array1::from_elem(cfg.channels, S::from_real(0.5)),
            g_skip_gain: Array1::zeros(cfg.channels),
            pos_fine: position_embedding_2d(cfg.self_grid(), d),
            pos_coarse: position_embedding_2d(cfg.cross_grid(), d),
            cfg,
        };
        Ok(model)
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.cfg
    }

    /// Forward pass with optional forced attention maps; returns the noise
    /// prediction, this pass's own maps, and the activation tape.
    pub fn forward(
        &self,
        z: &LatentGrid<S>,
        timestep: usize,
        total_steps: usize,
        prompt: &PromptEncoding<S>,
        image: Option<(&Array1<S>, S)>,
        injected: Option<&AttentionBundle<S>>,
    ) -> Result<(LatentGrid<S>, AttentionBundle<S>, Tape<S>)> {
        let cfg = &self.cfg;
        if z.shape() != (cfg.height, cfg.width, cfg.channels) {
            return Err(Error::shape(
                "denoiser latent",
                &[cfg.height, cfg.width, cfg.channels],
                &[z.height(), z.width(), z.channels()],
            ));
        }
        if timestep == 0 || timestep > total_steps {
            return Err(Error::invalid(format!(
                "timestep {timestep} outside 1..={total_steps}"
            )));
        }
        if prompt.is_empty() || prompt.embeddings.nrows() != prompt.len() || prompt.embeddings.ncols() != cfg.d_model {
            return Err(Error::invalid("prompt encoding shape does not match the model"));
        }
        if let Some((joint, weight)) = image {
            if joint.len() != cfg.joint_dim {
                return Err(Error::shape("image conditioning", &[cfg.joint_dim], &[joint.len()]));
            }
            if !weight.is_finite() {
                return Err(Error::invalid("image conditioning weight must be finite"));
            }
        }

        let grid1 = cfg.self_grid();
        let mut bundle = AttentionBundle::new();

        // Tokens: patches, position, time.
        let x0 = patchify(z.data(), cfg.patch);
        let h0 = self.patch_embed.forward(&x0) + &self.pos_fine;
        let tau = timestep as f64 / total_steps as f64;
        let tf_row = time_features::<S>(tau, cfg.d_model);
        let tf = tf_row.insert_axis(ndarray::Axis(0));
        let t_tanh = tanh_forward(&self.time1.forward(&tf));
        let temb = self.time2.forward(&t_tanh);
        let h1 = h0 + &temb.row(0);

        // Self-attention over the fine grid.
        let (n1, c_sa) = self.ln_sa.forward(&h1);
        let q1 = self.wq1.forward(&n1);
        let k1 = self.wk1.forward(&n1);
        let v1 = self.wv1.forward(&n1);
        let (own_attn1, cache1) = attn_forward(&q1, &k1, &v1)?;
        bundle.push(AttentionRecord {
            kind: AttentionKind::SelfAttention,
            block_id: SELF_ATTENTION_BLOCK,
            weights: cache1.weights.clone(),
        });
        let attn_used1 = match injected.and_then(|b| b.find(AttentionKind::SelfAttention, SELF_ATTENTION_BLOCK)) {
            Some(rec) => {
                if rec.weights.dim() != cache1.weights.dim() {
                    return Err(Error::shape(
                        "injected self-attention map",
                        &[cache1.weights.nrows(), cache1.weights.ncols()],
                        &[rec.weights.nrows(), rec.weights.ncols()],
                    ));
                }
                attention_output(&rec.weights, &v1)?
            }
            None => own_attn1,
        };
        let h2 = &h1 + &self.wo1.forward(&attn_used1);

        // Fine-grid MLP.
        let (n2, c_m1) = self.ln_m1.forward(&h2);
        let ta1 = tanh_forward(&self.m1a.forward(&n2));
        let h3 = &h2 + &self.m1b.forward(&ta1);

        // Pool to the coarse grid.
        let p = mean_pool_tokens(&h3, grid1) + &self.pos_coarse;

        // Coarse-grid MLP.
        let (n3, c_m2) = self.ln_m2.forward(&p);
        let ta2 = tanh_forward(&self.m2a.forward(&n3));
        let h4 = &p + &self.m2b.forward(&ta2);

        // Cross-attention: text, plus the optional decoupled image branch.
        let (n4, c_ca) = self.ln_ca.forward(&h4);
        let q2 = self.wq2.forward(&n4);
        let kt = self.wk_txt.forward(&prompt.embeddings);
        let vt = self.wv_txt.forward(&prompt.embeddings);
        let (own_txt, cache_t) = attn_forward(&q2, &kt, &vt)?;
        bundle.push(AttentionRecord {
            kind: AttentionKind::TextCross,
            block_id: TEXT_CROSS_BLOCK,
            weights: cache_t.weights.clone(),
        });
        let txt_used = match injected.and_then(|b| b.find(AttentionKind::TextCross, TEXT_CROSS_BLOCK)) {
            Some(rec) => {
                if rec.weights.dim() != cache_t.weights.dim() {
                    return Err(Error::shape(
                        "injected cross-attention map",
                        &[cache_t.weights.nrows(), cache_t.weights.ncols()],
                        &[rec.weights.nrows(), rec.weights.ncols()],
                    ));
                }
                attention_output(&rec.weights, &vt)?
            }
            None => own_txt,
        };

        // Image branch is skipped entirely at zero weight so that a zero
        // weight is bitwise identical to no conditioning.
        let mut combined = txt_used.clone();
        let image_tape = match image {
            Some((joint, weight)) if weight != S::zero() => {
                let joint_row = joint.clone().insert_axis(ndarray::Axis(0));
                let flat = self.img_proj.forward(&joint_row);
                let it = flat
                    .into_shape_with_order((cfg.image_tokens, cfg.d_model))
                    .expect("image token reshape");
                let ki = self.wk_img.forward(&it);
                let vi = self.wv_img.forward(&it);
                let (img_out, cache_i) = attn_forward(&q2, &ki, &vi)?;
                combined.zip_mut_with(&img_out, |c, o| *c += weight * *o);
                Some(ImageTape {
                    joint: joint.clone(),
                    weight,
                    it,
                    ki,
                    vi,
                    cache_i,
                })
            }
            _ => None,
        };
        let h5 = &h4 + &self.wo2.forward(&combined);

        // Back to the fine grid, skip connection, linear head, input skip.
        let h6 = nearest_upsample_tokens(&h5, cfg.cross_grid()) + &h3;
        let out_tokens = self.head.forward(&h6);
        let mut eps = unpatchify(&out_tokens, cfg.patch, cfg.height, cfg.width, cfg.channels);
        for ch in 0..cfg.channels {
            let gain = self.skip_gain[ch];
            for r in 0..cfg.height {
                for c in 0..cfg.width {
                    eps[[r, c, ch]] += gain * z.data()[[r, c, ch]];
                }
            }
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                timestep,
                details: "denoiser produced non-finite prediction".into(),
            });
        }

        let tape = Tape {
            z: z.clone(),
            x0,
            tf,
            t_tanh,
            n1,
            c_sa,
            q1,
            k1,
            v1,
            cache1,
            attn_used1,
            n2,
            c_m1,
            ta1,
            n3,
            c_m2,
            ta2,
            n4,
            c_ca,
            q2,
            kt,
            vt,
            cache_t,
            image: image_tape,
            combined,
            h6,
        };
        Ok((LatentGrid::from(eps), bundle, tape))
    }

    /// Accumulate gradients of a scalar loss with gradient `geps` w.r.t. the
    /// prediction returned by [`ToyDenoiser::forward`].
    ///
    /// Only valid for passes run without injected maps.
    pub fn backward(&mut self, tape: &Tape<S>, prompt: &PromptEncoding<S>, geps: &LatentGrid<S>) {
        let cfg = self.cfg;
        let grid1 = cfg.self_grid();

        // Head and input skip.
        for ch in 0..cfg.channels {
            let mut g = S::zero();
            for r in 0..cfg.height {
                for c in 0..cfg.width {
                    g += geps.data()[[r, c, ch]] * tape.z.data()[[r, c, ch]];
                }
            }
            self.g_skip_gain[ch] += g;
        }
        let g_out_tokens = patchify(geps.data(), cfg.patch);
        let g_h6 = self.head.backward(&tape.h6, &g_out_tokens);

        // Upsample + skip join.
        let g_h5 = nearest_upsample_tokens_backward(&g_h6, cfg.cross_grid());
        let mut g_h3 = g_h6;

        // Cross-attention block.
        let g_combined = self.wo2.backward(&tape.combined, &g_h5);
        let mut g_h4 = g_h5;
        let mut g_q2 = Array2::zeros(tape.q2.dim());
        if let Some(img) = &tape.image {
            let g_img_out = g_combined.mapv(|v| v * img.weight);
            let (gq_i, gk_i, gv_i) = attn_backward(&img.cache_i, &tape.q2, &img.ki, &img.vi, &g_img_out);
            g_q2 = &g_q2 + &gq_i;
            let g_it = self.wk_img.backward(&img.it, &gk_i) + self.wv_img.backward(&img.it, &gv_i);
            let g_flat = g_it
                .into_shape_with_order((1, cfg.image_tokens * cfg.d_model))
                .expect("image token reshape");
            let joint_row = img.joint.clone().insert_axis(ndarray::Axis(0));
            // Gradient stops at the (frozen) joint embedding.
            let _ = self.img_proj.backward(&joint_row, &g_flat);
        }
        let (gq_t, gk_t, gv_t) = attn_backward(&tape.cache_t, &tape.q2, &tape.kt, &tape.vt, &g_combined);
        g_q2 = &g_q2 + &gq_t;
        let g_prompt = self.wk_txt.backward(&prompt.embeddings, &gk_t)
            + self.wv_txt.backward(&prompt.embeddings, &gv_t);
        for (row, word) in g_prompt.rows().into_iter().zip(prompt.tokens.iter()) {
            let idx = token_index(word);
            for (dst, g) in self.g_token_table.row_mut(idx).iter_mut().zip(row.iter()) {
                *dst += *g;
            }
        }
        let g_n4 = self.wq2.backward(&tape.n4, &g_q2);
        g_h4 = &g_h4 + &self.ln_ca.backward(&tape.c_ca, &g_n4);

        // Coarse MLP.
        let g_ta2 = self.m2b.backward(&tape.ta2, &g_h4);
        let g_a2 = tanh_backward(&tape.ta2, &g_ta2);
        let g_n3 = self.m2a.backward(&tape.n3, &g_a2);
        let g_p = &g_h4 + &self.ln_m2.backward(&tape.c_m2, &g_n3);

        // Pool.
        g_h3 = &g_h3 + &mean_pool_tokens_backward(&g_p, grid1);

        // Fine MLP.
        let g_ta1 = self.m1b.backward(&tape.ta1, &g_h3);
        let g_a1 = tanh_backward(&tape.ta1, &g_ta1);
        let g_n2 = self.m1a.backward(&tape.n2, &g_a1);
        let g_h2 = &g_h3 + &self.ln_m1.backward(&tape.c_m1, &g_n2);

        // Self-attention block.
        let g_attn_used = self.wo1.backward(&tape.attn_used1, &g_h2);
        let (gq1, gk1, gv1) = attn_backward(&tape.cache1, &tape.q1, &tape.k1, &tape.v1, &g_attn_used);
        let g_n1 = self.wq1.backward(&tape.n1, &gq1)
            + self.wk1.backward(&tape.n1, &gk1)
            + self.wv1.backward(&tape.n1, &gv1);
        let g_h1 = &g_h2 + &self.ln_sa.backward(&tape.c_sa, &g_n1);

        // Time embedding (broadcast add: sum over tokens).
        let g_temb = g_h1
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));
        let g_t_tanh = self.time2.backward(&tape.t_tanh, &g_temb);
        let g_tf = tanh_backward(&tape.t_tanh, &g_t_tanh);
        let _ = self.time1.backward(&tape.tf, &g_tf);

        // Patch embedding.
        let _ = self.patch_embed.backward(&tape.x0, &g_h1);
    }

    pub fn zero_grad(&mut self) {
        self.g_token_table.fill(S::zero());
        self.g_skip_gain.fill(S::zero());
        for lin in [
            &mut self.patch_embed,
            &mut self.time1,
            &mut self.time2,
            &mut self.wq1,
            &mut self.wk1,
            &mut self.wv1,
            &mut self.wo1,
            &mut self.m1a,
            &mut self.m1b,
            &mut self.m2a,
            &mut self.m2b,
            &mut self.wq2,
            &mut self.wk_txt,
            &mut self.wv_txt,
            &mut self.img_proj,
            &mut self.wk_img,
            &mut self.wv_img,
            &mut self.wo2,
            &mut self.head,
        ] {
            lin.zero_grad();
        }
        for ln in [&mut self.ln_sa, &mut self.ln_m1, &mut self.ln_m2, &mut self.ln_ca] {
            ln.zero_grad();
        }
    }

    /// Scale all accumulated gradients (for batch averaging).
    pub fn scale_grads(&mut self, factor: S) {
        self.g_token_table.mapv_inplace(|v| v * factor);
        self.g_skip_gain.mapv_inplace(|v| v * factor);
        for lin in [
            &mut self.patch_embed,
            &mut self.time1,
            &mut self.time2,
            &mut self.wq1,
            &mut self.wk1,
            &mut self.wv1,
            &mut self.wo1,
            &mut self.m1a,
            &mut self.m1b,
            &mut self.m2a,
            &mut self.m2b,
            &mut self.wq2,
            &mut self.wk_txt,
            &mut self.wv_txt,
            &mut self.img_proj,
            &mut self.wk_img,
            &mut self.wv_img,
            &mut self.wo2,
            &mut self.head,
        ] {
            lin.gw.mapv_inplace(|v| v * factor);
            lin.gb.mapv_inplace(|v| v * factor);
        }
        for ln in [&mut self.ln_sa, &mut self.ln_m1, &mut self.ln_m2, &mut self.ln_ca] {
            ln.ggamma.mapv_inplace(|v| v * factor);
            ln.gbeta.mapv_inplace(|v| v * factor);
        }
    }

    /// One optimizer step over every parameter, in a fixed order.
    pub fn apply_adam(&mut self, opt: &mut Adam<S>) {
        opt.begin_step();
        opt.update(&mut self.token_table, &self.g_token_table.clone());
        opt.update(&mut self.skip_gain, &self.g_skip_gain.clone());
        macro_rules! lin {
            ($f:ident) => {
                opt.update(&mut self.$f.w, &self.$f.gw.clone());
                opt.update(&mut self.$f.b, &self.$f.gb.clone());
            };
        }
        macro_rules! ln {
            ($f:ident) => {
                opt.update(&mut self.$f.gamma, &self.$f.ggamma.clone());
                opt.update(&mut self.$f.beta, &self.$f.gbeta.clone());
            };
        }
        lin!(patch_embed);
        lin!(time1);
        lin!(time2);
        ln!(ln_sa);
        lin!(wq1);
        lin!(wk1);
        lin!(wv1);
        lin!(wo1);
        ln!(ln_m1);
        lin!(m1a);
        lin!(m1b);
        ln!(ln_m2);
        lin!(m2a);
        lin!(m2b);
        ln!(ln_ca);
        lin!(wq2);
        lin!(wk_txt);
        lin!(wv_txt);
        lin!(img_proj);
        lin!(wk_img);
        lin!(wv_img);
        lin!(wo2);
        lin!(head);
    }

    /// Named parameter tensors for checkpointing, in a stable order.
    pub fn tensors(&self) -> Vec<(String, ArrayD<S>)> {
        let mut out: Vec<(String, ArrayD<S>)> = vec![
            ("token_table".into(), self.token_table.clone().into_dyn()),
            ("skip_gain".into(), self.skip_gain.clone().into_dyn()),
        ];
        let lins: [(&str, &Linear<S>); 19] = [
            ("patch_embed", &self.patch_embed),
            ("time1", &self.time1),
            ("time2", &self.time2),
            ("wq1", &self.wq1),
            ("wk1", &self.wk1),
            ("wv1", &self.wv1),
            ("wo1", &self.wo1),
            ("m1a", &self.m1a),
            ("m1b", &self.m1b),
            ("m2a", &self.m2a),
            ("m2b", &self.m2b),
            ("wq2", &self.wq2),
            ("wk_txt", &self.wk_txt),
            ("wv_txt", &self.wv_txt),
            ("img_proj", &self.img_proj),
            ("wk_img", &self.wk_img),
            ("wv_img", &self.wv_img),
            ("wo2", &self.wo2),
            ("head", &self.head),
        ];
        for (name, lin) in lins {
            out.push((format!("{name}.w"), lin.w.clone().into_dyn()));
            out.push((format!("{name}.b"), lin.b.clone().into_dyn()));
        }
        let lns: [(&str, &LayerNorm<S>); 4] = [
            ("ln_sa", &self.ln_sa),
            ("ln_m1", &self.ln_m1),
            ("ln_m2", &self.ln_m2),
            ("ln_ca", &self.ln_ca),
        ];
        for (name, ln) in lns {
            out.push((format!("{name}.gamma"), ln.gamma.clone().into_dyn()));
            out.push((format!("{name}.beta"), ln.beta.clone().into_dyn()));
        }
        out
    }

    /// Replace parameters from named tensors (inverse of
    /// [`ToyDenoiser::tensors`]).
    pub fn load_tensors(&mut self, tensors: &[(String, ArrayD<S>)]) -> Result<()> {
        let take2 = |name: &str| -> Result<Array2<S>> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            t.1.clone()
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint(format!("tensor {name} has wrong rank")))
        };
        let take1 = |name: &str| -> Result<Array1<S>> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            t.1.clone()
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint(format!("tensor {name} has wrong rank")))
        };
        let check2 = |got: &Array2<S>, want: (usize, usize), name: &str| -> Result<()> {
            if got.dim() != want {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected {:?}, got {:?}",
                    want,
                    got.dim()
                )));
            }
            Ok(())
        };

        let tt = take2("token_table")?;
        check2(&tt, (VOCABULARY.len(), self.cfg.d_model), "token_table")?;
        self.token_table = tt;
        let sg = take1("skip_gain")?;
        if sg.len() != self.cfg.channels {
            return Err(Error::Checkpoint("tensor skip_gain has wrong length".into()));
        }
        self.skip_gain = sg;

        macro_rules! lin {
            ($f:ident) => {{
                let w = take2(concat!(stringify!($f), ".w"))?;
                check2(&w, self.$f.w.dim(), concat!(stringify!($f), ".w"))?;
                let b = take1(concat!(stringify!($f), ".b"))?;
                if b.len() != self.$f.b.len() {
                    return Err(Error::Checkpoint(concat!("tensor ", stringify!($f), ".b has wrong length").into()));
                }
                self.$f.w = w;
                self.$f.b = b;
            }};
        }
        macro_rules! ln {
            ($f:ident) => {{
                let g = take1(concat!(stringify!($f), ".gamma"))?;
                let b = take1(concat!(stringify!($f), ".beta"))?;
                if g.len() != self.$f.gamma.len() || b.len() != self.$f.beta.len() {
                    return Err(Error::Checkpoint(concat!("tensor ", stringify!($f), " has wrong length").into()));
                }
                self.$f.gamma = g;
                self.$f.beta = b;
            }};
        }
        lin!(patch_embed);
        lin!(time1);
        lin!(time2);
        ln!(ln_sa);
        lin!(wq1);
        lin!(wk1);
        lin!(wv1);
        lin!(wo1);
        ln!(ln_m1);
        lin!(m1a);
        lin!(m1b);
        ln!(ln_m2);
        lin!(m2a);
        lin!(m2b);
        ln!(ln_ca);
        lin!(wq2);
        lin!(wk_txt);
        lin!(wv_txt);
        lin!(img_proj);
        lin!(wk_img);
        lin!(wv_img);
        lin!(wo2);
        lin!(head);
        Ok(())
    }

    /// Checkpoint metadata describing this architecture.
    pub fn meta(&self) -> Vec<(String, u32)> {
        vec![
            ("height".into(), self.cfg.height as u32),
            ("width".into(), self.cfg.width as u32),
            ("channels".into(), self.cfg.channels as u32),
            ("patch".into(), self.cfg.patch as u32),
            ("d_model".into(), self.cfg.d_model as u32),
            ("hidden".into(), self.cfg.hidden as u32),
            ("image_tokens".into(), self.cfg.image_tokens as u32),
            ("joint_dim".into(), self.cfg.joint_dim as u32),
            ("vocab".into(), VOCABULARY.len() as u32),
        ]
    }

    /// Rebuild the architecture from checkpoint metadata.
    pub fn config_from_meta(meta: &[(String, u32)]) -> Result<ToyDenoiserConfig> {
        let get = |k: &str| -> Result<usize> {
            meta.iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| *v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key {k}")))
        };
        if get("vocab")? != VOCABULARY.len() {
            return Err(Error::Checkpoint("checkpoint vocabulary size differs from this build".into()));
        }
        Ok(ToyDenoiserConfig {
            height: get("height")?,
            width: get("width")?,
            channels: get("channels")?,
            patch: get("patch")?,
            d_model: get("d_model")?,
            hidden: get("hidden")?,
            image_tokens: get("image_tokens")?,
            joint_dim: get("joint_dim")?,
        })
    }
}

impl<S: Scalar> Denoiser<S> for ToyDenoiser<S> {
    fn encode_prompt(&self, prompt: &str) -> Result<PromptEncoding<S>> {
        let mut tokens: Vec<String> = prompt
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect();
        if tokens.is_empty() {
            tokens.push(NULL_TOKEN.to_string());
        }
        let mut embeddings = Array2::zeros((tokens.len(), self.cfg.d_model));
        for (i, word) in tokens.iter().enumerate() {
            let idx = token_index(word);
            embeddings.row_mut(i).assign(&self.token_table.row(idx));
        }
        Ok(PromptEncoding { tokens, embeddings })
    }

    fn predict_noise(&self, input: &DenoiserInput<'_, S>) -> Result<(LatentGrid<S>, AttentionBundle<S>)> {
        let image = input.image.map(|c| (c.vector(), c.weight));
        let (eps, bundle, _tape) = self.forward(
            input.latent,
            input.timestep,
            input.total_steps,
            input.prompt,
            image,
            input.injected,
        )?;
        Ok((eps, bundle))
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.cfg.height, self.cfg.width, self.cfg.channels)
    }
}

// Checkpoint plumbing lives in `io::checkpoint`; keep an ArrayD alias nearby
// for signatures above.
#[allow(unused)]
type Dyn<S> = ArrayD<S>;
#[allow(unused)]
type DynIx = IxDyn;

//! A small contrastively trained joint image/text embedder.
//!
//! Images go through a per-patch projection with a tanh, mean pooling, and a
//! linear head; texts through a token-embedding average and a linear head.
//! The text side is purely linear, so prompt arithmetic (swapping one word)
//! moves the embedding by a context-independent offset — exactly what
//! target-embedding estimation relies on.

use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::embedding::{EmbeddingVector, JointEmbedder};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::toy::nn::{patchify, tanh_backward, tanh_forward, Adam, Linear};
use crate::toy::scene::{token_index, SceneSpec, NULL_TOKEN, VOCABULARY};

/// Architecture of the embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyEmbedderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub joint_dim: usize,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
            joint_dim: 64,
        }
    }
}

impl ToyEmbedderConfig {
    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::invalid("patch size must divide the image size"));
        }
        if self.joint_dim == 0 || self.channels == 0 {
            return Err(Error::invalid("config dimensions must be positive"));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    fn patch_count(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

/// The embedder model.
#[derive(Debug, Clone)]
pub struct ToyJointEmbedder<S> {
    cfg: ToyEmbedderConfig,
    pub(crate) patch_proj: Linear<S>,
    pub(crate) img_out: Linear<S>,
    pub(crate) txt_table: Array2<S>,
    pub(crate) g_txt_table: Array2<S>,
    pub(crate) txt_out: Linear<S>,
}

impl<S: Scalar> ToyJointEmbedder<S> {
    pub fn new(cfg: ToyEmbedderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let j = cfg.joint_dim;
        Ok(Self {
            patch_proj: Linear::new(cfg.patch_dim(), j, &mut rng),
            img_out: Linear::new(j, j, &mut rng),
            txt_table: Array2::from_shape_fn((VOCABULARY.len(), j), |_| {
                S::from_real(rng.gen_range(-0.1..0.1))
            }),
            g_txt_table: Array2::zeros((VOCABULARY.len(), j)),
            txt_out: Linear::new(j, j, &mut rng),
            cfg,
        })
    }

    pub fn config(&self) -> &ToyEmbedderConfig {
        &self.cfg
    }

    fn check_image(&self, image: &LatentGrid<S>) -> Result<()> {
        if image.shape() != (self.cfg.height, self.cfg.width, self.cfg.channels) {
            return Err(Error::shape(
                "embedder image",
                &[self.cfg.height, self.cfg.width, self.cfg.channels],
                &[image.height(), image.width(), image.channels()],
            ));
        }
        Ok(())
    }

    /// Per-patch tanh features, one row per patch (also the structure
    /// features exposed through [`JointEmbedder::patch_features`]).
    fn image_patch_features(&self, image: &LatentGrid<S>) -> Array2<S> {
        tanh_forward(&self.patch_proj.forward(&patchify(image.data(), self.cfg.patch)))
    }

    fn token_rows(&self, text: &str) -> Vec<usize> {
        let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
        if words.is_empty() {
            vec![token_index(NULL_TOKEN)]
        } else {
            words.iter().map(|w| token_index(w)).collect()
        }
    }

    fn text_mean(&self, rows: &[usize]) -> Array1<S> {
        let mut mean = Array1::zeros(self.cfg.joint_dim);
        for &r in rows {
            mean = mean + &self.txt_table.row(r);
        }
        mean / S::from_real(rows.len() as f64)
    }

    /// Named parameter tensors for checkpointing.
    pub fn tensors(&self) -> Vec<(String, ArrayD<S>)> {
        vec![
            ("patch_proj.w".into(), self.patch_proj.w.clone().into_dyn()),
            ("patch_proj.b".into(), self.patch_proj.b.clone().into_dyn()),
            ("img_out.w".into(), self.img_out.w.clone().into_dyn()),
            ("img_out.b".into(), self.img_out.b.clone().into_dyn()),
            ("txt_table".into(), self.txt_table.clone().into_dyn()),
            ("txt_out.w".into(), self.txt_out.w.clone().into_dyn()),
            ("txt_out.b".into(), self.txt_out.b.clone().into_dyn()),
        ]
    }

    pub fn load_tensors(&mut self, tensors: &[(String, ArrayD<S>)]) -> Result<()> {
        fn find<'a, S>(tensors: &'a [(String, ArrayD<S>)], name: &str) -> Result<&'a ArrayD<S>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        }
        let to2 = |t: &ArrayD<S>, name: &str| -> Result<Array2<S>> {
            t.clone()
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint(format!("tensor {name} has wrong rank")))
        };
        let to1 = |t: &ArrayD<S>, name: &str| -> Result<Array1<S>> {
            t.clone()
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint(format!("tensor {name} has wrong rank")))
        };
        let pw = to2(find(tensors, "patch_proj.w")?, "patch_proj.w")?;
        if pw.dim() != self.patch_proj.w.dim() {
            return Err(Error::Checkpoint("patch_proj.w shape mismatch".into()));
        }
        self.patch_proj.w = pw;
        self.patch_proj.b = to1(find(tensors, "patch_proj.b")?, "patch_proj.b")?;
        self.img_out.w = to2(find(tensors, "img_out.w")?, "img_out.w")?;
        self.img_out.b = to1(find(tensors, "img_out.b")?, "img_out.b")?;
        let tt = to2(find(tensors, "txt_table")?, "txt_table")?;
        if tt.dim() != (VOCABULARY.len(), self.cfg.joint_dim) {
            return Err(Error::Checkpoint("txt_table shape mismatch".into()));
        }
        self.txt_table = tt;
        self.txt_out.w = to2(find(tensors, "txt_out.w")?, "txt_out.w")?;
        self.txt_out.b = to1(find(tensors, "txt_out.b")?, "txt_out.b")?;
        Ok(())
    }

    pub fn meta(&self) -> Vec<(String, u32)> {
        vec![
            ("height".into(), self.cfg.height as u32),
            ("width".into(), self.cfg.width as u32),
            ("channels".into(), self.cfg.channels as u32),
            ("patch".into(), self.cfg.patch as u32),
            ("joint_dim".into(), self.cfg.joint_dim as u32),
            ("vocab".into(), VOCABULARY.len() as u32),
        ]
    }

    pub fn config_from_meta(meta: &[(String, u32)]) -> Result<ToyEmbedderConfig> {
        let get = |k: &str| -> Result<usize> {
            meta.iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| *v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key {k}")))
        };
        if get("vocab")? != VOCABULARY.len() {
            return Err(Error::Checkpoint("checkpoint vocabulary size differs from this build".into()));
        }
        Ok(ToyEmbedderConfig {
            height: get("height")?,
            width: get("width")?,
            channels: get("channels")?,
            patch: get("patch")?,
            joint_dim: get("joint_dim")?,
        })
    }
}

impl<S: Scalar> JointEmbedder<S> for ToyJointEmbedder<S> {
    fn embed_image(&self, image: &LatentGrid<S>) -> Result<EmbeddingVector<S>> {
        self.check_image(image)?;
        let feats = self.image_patch_features(image);
        let mean = feats.sum_axis(ndarray::Axis(0)) / S::from_real(feats.nrows() as f64);
        let out = self
            .img_out
            .forward(&mean.insert_axis(ndarray::Axis(0)))
            .remove_axis(ndarray::Axis(0));
        EmbeddingVector::image(out)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector<S>> {
        let rows = self.token_rows(text);
        let mean = self.text_mean(&rows);
        let out = self
            .txt_out
            .forward(&mean.insert_axis(ndarray::Axis(0)))
            .remove_axis(ndarray::Axis(0));
        EmbeddingVector::text(out)
    }

    fn patch_features(&self, image: &LatentGrid<S>) -> Result<Array2<S>> {
        self.check_image(image)?;
        Ok(self.image_patch_features(image))
    }

    fn dim(&self) -> usize {
        self.cfg.joint_dim
    }
}

/// Knobs for contrastive training.
#[derive(Debug, Clone, Copy)]
pub struct EmbedderTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainOpts {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 24,
            learning_rate: 3e-3,
            temperature: 0.1,
            seed: 0,
        }
    }
}

/// Loss curve of a training run (empty when training ran zero epochs).
#[derive(Debug, Clone)]
pub struct TrainingStats {
    pub epoch_losses: Vec<f64>,
}

impl TrainingStats {
    /// Mean loss of the first epoch, if any epoch ran.
    pub fn initial_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    /// Mean loss of the last epoch, if any epoch ran.
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Train `model` so matched image/description pairs embed close together
/// (symmetric batch cross-entropy over cosine similarities).
pub fn train_toy_embedder<S: Scalar>(
    model: &mut ToyJointEmbedder<S>,
    scenes: &[SceneSpec],
    opts: &EmbedderTrainOpts,
) -> Result<TrainingStats> {
    if scenes.len() < 2 {
        return Err(Error::invalid("contrastive training needs at least two scenes"));
    }
    if opts.batch_size < 2 {
        return Err(Error::invalid("contrastive batches need batch_size >= 2"));
    }
    let mut rng = rng_from_seed(opts.seed);
    let mut opt = Adam::new(S::from_real(opts.learning_rate));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let images: Vec<LatentGrid<S>> = scenes.iter().map(|s| s.render()).collect();
    let texts: Vec<String> = scenes.iter().map(|s| s.describe()).collect();

    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let loss = contrastive_step(model, chunk, &images, &texts, opts.temperature, &mut opt)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    details: format!("contrastive loss became {loss}"),
                });
            }
            epoch_loss += loss;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);
    }
    Ok(TrainingStats { epoch_losses })
}

/// One optimizer step on a batch; returns the batch loss.
fn contrastive_step<S: Scalar>(
    model: &mut ToyJointEmbedder<S>,
    batch: &[usize],
    images: &[LatentGrid<S>],
    texts: &[String],
    temperature: f64,
    opt: &mut Adam<S>,
) -> Result<f64> {
    let b = batch.len();
    let j = model.cfg.joint_dim;
    let n_patches = model.cfg.patch_count();

    // Forward, keeping activations.
    let mut patch_feats = Vec::with_capacity(b);
    let mut patch_inputs = Vec::with_capacity(b);
    let mut img_means = Array2::zeros((b, j));
    let mut txt_means = Array2::zeros((b, j));
    let mut token_rows = Vec::with_capacity(b);
    for (row, &idx) in batch.iter().enumerate() {
        let x = patchify(images[idx].data(), model.cfg.patch);
        let f = tanh_forward(&model.patch_proj.forward(&x));
        img_means
            .row_mut(row)
            .assign(&(f.sum_axis(ndarray::Axis(0)) / S::from_real(n_patches as f64)));
        patch_inputs.push(x);
        patch_feats.push(f);
        let rows = model.token_rows(&texts[idx]);
        txt_means.row_mut(row).assign(&model.text_mean(&rows));
        token_rows.push(rows);
    }
    let e = model.img_out.forward(&img_means); // b x j image embeddings
    let f = model.txt_out.forward(&txt_means); // b x j text embeddings

    // Cosine similarity matrix and its row/column softmaxes.
    let enorm: Vec<f64> = e.rows().into_iter().map(|r| r.iter().map(|v| v.to_real().powi(2)).sum::<f64>().sqrt().max(1e-12)).collect();
    let fnorm: Vec<f64> = f.rows().into_iter().map(|r| r.iter().map(|v| v.to_real().powi(2)).sum::<f64>().sqrt().max(1e-12)).collect();
    let mut cos = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        for k in 0..b {
            let dot: f64 = e
                .row(i)
                .iter()
                .zip(f.row(k).iter())
                .map(|(x, y)| x.to_real() * y.to_real())
                .sum();
            cos[[i, k]] = dot / (enorm[i] * fnorm[k]);
        }
    }
    let logits = cos.mapv(|c| c / temperature);
    let softmax_rows = crate::attention::softmax_rows(&logits);
    let softmax_cols = crate::attention::softmax_rows(&logits.t().to_owned());

    let mut loss = 0.0;
    for i in 0..b {
        loss -= softmax_rows[[i, i]].max(1e-30).ln();
        loss -= softmax_cols[[i, i]].max(1e-30).ln();
    }
    loss /= 2.0 * b as f64;

    // d loss / d logits, then back to cosine and the embeddings.
    let mut glogits = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        for k in 0..b {
            let row_term = softmax_rows[[i, k]] - if i == k { 1.0 } else { 0.0 };
            let col_term = softmax_cols[[k, i]] - if i == k { 1.0 } else { 0.0 };
            glogits[[i, k]] = (row_term + col_term) / (2.0 * b as f64);
        }
    }
    let gcos = glogits.mapv(|g| g / temperature);

    let mut ge = Array2::<S>::zeros((b, j));
    let mut gf = Array2::<S>::zeros((b, j));
    for i in 0..b {
        for k in 0..b {
            let g = gcos[[i, k]];
            if g == 0.0 {
                continue;
            }
            for d in 0..j {
                let ev = e[[i, d]].to_real();
                let fv = f[[k, d]].to_real();
                let de = fv / (enorm[i] * fnorm[k]) - cos[[i, k]] * ev / (enorm[i] * enorm[i]);
                let df = ev / (enorm[i] * fnorm[k]) - cos[[i, k]] * fv / (fnorm[k] * fnorm[k]);
                ge[[i, d]] += S::from_real(g * de);
                gf[[k, d]] += S::from_real(g * df);
            }
        }
    }

    // Backward through both towers.
    model.patch_proj.zero_grad();
    model.img_out.zero_grad();
    model.txt_out.zero_grad();
    model.g_txt_table.fill(S::zero());

    let g_img_means = model.img_out.backward(&img_means, &ge);
    for (row, _) in batch.iter().enumerate() {
        let g_mean = g_img_means.row(row);
        let scale = S::one() / S::from_real(n_patches as f64);
        let mut g_feats = Array2::zeros((n_patches, j));
        for p in 0..n_patches {
            for d in 0..j {
                g_feats[[p, d]] = g_mean[d] * scale;
            }
        }
        let g_pre = tanh_backward(&patch_feats[row], &g_feats);
        let _ = model.patch_proj.backward(&patch_inputs[row], &g_pre);
    }

    let g_txt_means = model.txt_out.backward(&txt_means, &gf);
    for (row, rows) in token_rows.iter().enumerate() {
        let scale = S::one() / S::from_real(rows.len() as f64);
        for &r in rows {
            for d in 0..j {
                model.g_txt_table[[r, d]] += g_txt_means[[row, d]] * scale;
            }
        }
    }

    opt.begin_step();
    opt.update(&mut model.patch_proj.w, &model.patch_proj.gw.clone());
    opt.update(&mut model.patch_proj.b, &model.patch_proj.gb.clone());
    opt.update(&mut model.img_out.w, &model.img_out.gw.clone());
    opt.update(&mut model.img_out.b, &model.img_out.gb.clone());
    opt.update(&mut model.txt_table, &model.g_txt_table.clone());
    opt.update(&mut model.txt_out.w, &model.txt_out.gw.clone());
    opt.update(&mut model.txt_out.b, &model.txt_out.gb.clone());
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;
    use crate::toy::corpus::training_scenes;

    #[test]
    fn text_embedding_offsets_are_context_independent() {
        let model = ToyJointEmbedder::<f64>::new(ToyEmbedderConfig::default(), 3).unwrap();
        let a1 = model.embed_text("a small red square in the center on a gray background").unwrap();
        let b1 = model.embed_text("a small blue square in the center on a gray background").unwrap();
        let a2 = model.embed_text("a large red circle in the north on a white background").unwrap();
        let b2 = model.embed_text("a large blue circle in the north on a white background").unwrap();
        let d1 = b1.values() - a1.values();
        let d2 = b2.values() - a2.values();
        for (x, y) in d1.iter().zip(d2.iter()) {
            approx::assert_relative_eq!(x, y, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn training_aligns_matched_pairs() {
        let scenes = training_scenes(48, 77);
        let mut model = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 5).unwrap();
        let opts = EmbedderTrainOpts {
            epochs: 20,
            batch_size: 16,
            ..Default::default()
        };
        let stats = train_toy_embedder(&mut model, &scenes, &opts).unwrap();
        assert!(stats.final_loss().unwrap() < stats.initial_loss().unwrap(), "{stats:?}");
        // Matched pairs should now score higher than mismatched ones on
        // average.
        let mut matched = 0.0;
        let mut mismatched = 0.0;
        let mut pairs = 0.0;
        for (i, s) in scenes.iter().take(12).enumerate() {
            let e = model.embed_image(&s.render()).unwrap();
            for (k, s2) in scenes.iter().take(12).enumerate() {
                let f = model.embed_text(&s2.describe()).unwrap();
                let c = cosine_similarity(&e, &f).unwrap() as f64;
                if i == k {
                    matched += c;
                } else {
                    mismatched += c;
                    pairs += 1.0;
                }
            }
        }
        let matched_mean = matched / 12.0;
        let mismatched_mean = mismatched / pairs;
        assert!(
            matched_mean > mismatched_mean + 0.05,
            "matched {matched_mean} vs mismatched {mismatched_mean}"
        );
    }

    #[test]
    fn contrastive_gradients_match_finite_difference() {
        let scenes = training_scenes(4, 9);
        let model = ToyJointEmbedder::<f64>::new(
            ToyEmbedderConfig {
                joint_dim: 6,
                ..Default::default()
            },
            11,
        )
        .unwrap();
        let images: Vec<LatentGrid<f64>> = scenes.iter().map(|s| s.render()).collect();
        let texts: Vec<String> = scenes.iter().map(|s| s.describe()).collect();
        let batch: Vec<usize> = vec![0, 1, 2, 3];
        let temp = 0.2;

        // Loss only (no update): run contrastive_step with a zero-lr Adam on
        // a clone, reading its internally accumulated grads afterwards.
        let mut opt = Adam::new(0.0);
        let mut m = model.clone();
        let _ = contrastive_step(&mut m, &batch, &images, &texts, temp, &mut opt).unwrap();

        let loss_of = |mm: &ToyJointEmbedder<f64>| -> f64 {
            let mut c = mm.clone();
            let mut o = Adam::new(0.0);
            contrastive_step(&mut c, &batch, &images, &texts, temp, &mut o).unwrap()
        };
        let h = 1e-6;
        for (get_g, set, base) in [
            (
                m.patch_proj.gw[[3, 2]],
                Box::new(|mm: &mut ToyJointEmbedder<f64>, v: f64| mm.patch_proj.w[[3, 2]] = v) as Box<dyn Fn(&mut ToyJointEmbedder<f64>, f64)>,
                model.patch_proj.w[[3, 2]],
            ),
            (
                m.img_out.gw[[1, 4]],
                Box::new(|mm: &mut ToyJointEmbedder<f64>, v: f64| mm.img_out.w[[1, 4]] = v),
                model.img_out.w[[1, 4]],
            ),
            (
                m.txt_out.gw[[2, 0]],
                Box::new(|mm: &mut ToyJointEmbedder<f64>, v: f64| mm.txt_out.w[[2, 0]] = v),
                model.txt_out.w[[2, 0]],
            ),
            (
                m.g_txt_table[[token_index("a"), 3]],
                Box::new(|mm: &mut ToyJointEmbedder<f64>, v: f64| mm.txt_table[[token_index("a"), 3]] = v),
                model.txt_table[[token_index("a"), 3]],
            ),
        ] {
            let mut ma = model.clone();
            set(&mut ma, base + h);
            let la = loss_of(&ma);
            let mut mb = model.clone();
            set(&mut mb, base - h);
            let lb = loss_of(&mb);
            let expect = (la - lb) / (2.0 * h);
            approx::assert_relative_eq!(get_g, expect, max_relative = 1e-4, epsilon = 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let scenes = training_scenes(24, 13);
        let opts = EmbedderTrainOpts {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let mut a = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 21).unwrap();
        train_toy_embedder(&mut a, &scenes, &opts).unwrap();
        let mut b = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 21).unwrap();
        train_toy_embedder(&mut b, &scenes, &opts).unwrap();
        let img = scenes[0].render();
        assert_eq!(
            a.embed_image(&img).unwrap().values(),
            b.embed_image(&img).unwrap().values()
        );
    }
}

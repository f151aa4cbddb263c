//! The assembled network: patch embedding, optional enhancement tensor,
//! class token and position embedding, the encoder stack, the global branch
//! (optionally through fusion-reconstruction) and the optional slicing
//! branches. During training each branch feature passes a batch-norm neck
//! into a bias-free identity classifier; embeddings are taken before the
//! neck.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frm::frm_forward;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::pfde::{init_lpde_with, pfde_forward, LpdeInit};
use crate::ssm::{branch_rows, class_feature, ssm_apply, SlicingMode};
use crate::vit::{compute_grid, extract_patches, EncoderBlock, Grid, PatchConfig, PatchEmbed, INIT_STD, LN_EPS};

const HEAD_INIT_STD: f64 = 0.001;
const NECK_EPS: f64 = 1e-3;

/// Head names in feature order.
pub const HEAD_NAMES: [&str; 5] = ["global", "left", "middle", "right", "glf"];

/// Which of the three add-on modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modules {
    pub pfde: bool,
    pub frm: bool,
    pub ssm: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Modules::ALL
    }
}

impl Modules {
    pub const NONE: Modules = Modules { pfde: false, frm: false, ssm: false };
    pub const ALL: Modules = Modules { pfde: true, frm: true, ssm: true };

    /// The six combinations of the ablation grid, baseline first.
    pub const ABLATIONS: [Modules; 6] = [
        Modules::NONE,
        Modules { pfde: true, frm: false, ssm: false },
        Modules { pfde: true, frm: true, ssm: false },
        Modules { pfde: false, frm: true, ssm: true },
        Modules { pfde: true, frm: false, ssm: true },
        Modules::ALL,
    ];

    /// Parses a comma-separated list such as `"pfde,ssm"`; the empty string
    /// selects the baseline.
    pub fn parse(list: &str) -> Result<Self> {
        let mut m = Modules::NONE;
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "pfde" => m.pfde = true,
                "frm" => m.frm = true,
                "ssm" => m.ssm = true,
                other => return Err(Error::Config(format!("ablation: unknown module {other:?} (expected pfde, frm, ssm)"))),
            }
        }
        Ok(m)
    }
}

impl fmt::Display for Modules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.pfde, "pfde"), (self.frm, "frm"), (self.ssm, "ssm")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub modules: Modules,
    pub beta: f64,
    pub lpde_init: LpdeInit,
    pub ssm_slicing: SlicingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: PatchConfig::default(),
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            modules: Modules::ALL,
            beta: 1.0,
            lpde_init: LpdeInit::Constant,
            ssm_slicing: SlicingMode::Contiguous,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<Grid> {
        let grid = compute_grid(&self.patch)?;
        if self.depth == 0 {
            return Err(Error::Config("model.depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.patch.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.heads = {} must divide patch.dim = {}",
                self.heads, self.patch.dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("model.mlp_ratio must be at least 1".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("model.beta must be finite and positive, got {}", self.beta)));
        }
        if self.modules.ssm {
            branch_rows(self.ssm_slicing, grid)?;
        }
        Ok(grid)
    }

    /// Embedding width: `D`, or `5·D` with the slicing branches.
    pub fn feature_dim(&self) -> usize {
        self.head_count() * self.patch.dim
    }

    pub fn head_count(&self) -> usize {
        if self.modules.ssm {
            5
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
struct SsmParts {
    block: EncoderBlock,
    norm: ParamId,
    rows: [Vec<usize>; 3],
}

#[derive(Clone, Debug)]
pub struct PftModel {
    config: ModelConfig,
    grid: Grid,
    num_ids: usize,
    store: ParamStore,
    embed: PatchEmbed,
    lpde: Option<ParamId>,
    class_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: ParamId,
    ssm: Option<SsmParts>,
    heads: Vec<ParamId>,
    necks: Vec<ParamId>,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Class features `[B, D]`, one per head in [`HEAD_NAMES`] order.
    pub features: Vec<Var>,
    /// Normalized global-branch output `[B, N+1, D]`.
    pub tokens: Var,
    /// Attention nodes of the global branch, first block to last.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Loss {
    pub total: Var,
    pub per_head: Vec<Var>,
}

impl PftModel {
    pub fn new(config: &ModelConfig, num_ids: usize, seed: u64) -> Result<Self> {
        let grid = config.validate()?;
        if num_ids == 0 {
            return Err(Error::Config("need at least one identity".into()));
        }
        let d = config.patch.dim;
        let hidden = d * config.mlp_ratio;
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut store, &config.patch, seed)?;
        let lpde = if config.modules.pfde {
            let l = init_lpde_with(&config.patch, config.beta, config.lpde_init, seed)?;
            Some(store.add("pfde.lpde", l.values)?)
        } else {
            None
        };
        let class_token = store.add_full("cls_token", &[1, d], 0.0)?;
        let pos_embed = store.add_normal("pos_embed", &[grid.count + 1, d], INIT_STD, seed)?;
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&mut store, &format!("blocks.{i}"), d, config.heads, hidden, seed))
            .collect::<Result<Vec<_>>>()?;
        let norm = store.add_full("norm.gain", &[d], 1.0)?;
        let ssm = if config.modules.ssm {
            Some(SsmParts {
                block: EncoderBlock::new(&mut store, "ssm.block", d, config.heads, hidden, seed)?,
                norm: store.add_full("ssm.norm.gain", &[d], 1.0)?,
                rows: branch_rows(config.ssm_slicing, grid)?,
            })
        } else {
            None
        };
        let heads = HEAD_NAMES[..config.head_count()]
            .iter()
            .map(|h| store.add_normal(&format!("head.{h}.weight"), &[d, num_ids], HEAD_INIT_STD, seed))
            .collect::<Result<Vec<_>>>()?;
        let necks = HEAD_NAMES[..config.head_count()]
            .iter()
            .map(|h| store.add_full(&format!("neck.{h}.gain"), &[d], 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(PftModel {
            necks,
            config: config.clone(),
            grid,
            num_ids,
            store,
            embed,
            lpde,
            class_token,
            pos_embed,
            blocks,
            norm,
            ssm,
            heads,
        })
    }

    /// Rebuilds a model from named tensors; the identity count is read from
    /// the classifier shape and every name must match the topology.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let head = tensors
            .iter()
            .find(|(n, _)| n == "head.global.weight")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no head.global.weight".into()))?;
        let [dim, num_ids] = head.1.shape() else {
            return Err(Error::Checkpoint(format!("head.global.weight has rank {}", head.1.rank())));
        };
        if *dim != config.patch.dim {
            return Err(Error::Checkpoint(format!(
                "embedding width mismatch: config has dim {}, checkpoint has {dim}",
                config.patch.dim
            )));
        }
        let mut model = PftModel::new(config, *num_ids, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in tensors {
            model.store.assign(&name, t)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn num_ids(&self) -> usize {
        self.num_ids
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// `images`: `[B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, images: &Tensor) -> Result<Forward> {
        let b = images.shape().first().copied().unwrap_or(0);
        let d = self.config.patch.dim;
        let depth = self.blocks.len();
        let mut patches = extract_patches(images, &self.config.patch)?;
        // pixels in [0, 1] to [-1, 1]
        patches.data_mut().iter_mut().for_each(|x| *x = 2.0 * *x - 1.0);
        let patches = tape.constant(patches);
        let mut x = self.embed.forward(tape, bind, patches)?;
        if let Some(lpde) = self.lpde {
            x = pfde_forward(tape, x, bind.var(lpde))?;
        }
        let cls = tape.expand(bind.var(self.class_token), b)?;
        let x = tape.concat(&[cls, x], 1)?;
        let x = tape.add_broadcast(x, bind.var(self.pos_embed))?;

        let trunk = crate::vit::encode(tape, bind, &self.blocks, 0..depth - 1, x)?;
        let mut attention = trunk.attention;
        let z = trunk.out;

        let g = if self.config.modules.frm { frm_forward(tape, z)? } else { z };
        let last = self.blocks[depth - 1].forward(tape, bind, g)?;
        attention.push(last.attention);
        let no_bias = tape.constant(Tensor::zeros(&[d]));
        let tokens = tape.layer_norm(last.out, bind.var(self.norm), no_bias, LN_EPS)?;
        let mut features = vec![class_feature(tape, tokens)?];

        if let Some(ssm) = &self.ssm {
            let out = ssm_apply(tape, bind, z, &ssm.rows, &ssm.block)?;
            for f in out.class_features {
                features.push(tape.layer_norm(f, bind.var(ssm.norm), no_bias, LN_EPS)?);
            }
        }
        debug_assert!(features.iter().all(|&f| tape.shape(f) == [b, d]));
        Ok(Forward { features, tokens, attention })
    }

    /// Sum over heads of cross-entropy on the batch-normed feature plus, when
    /// `triplet_margin` is set, batch-hard triplet loss on the raw feature.
    pub fn loss(&self, tape: &mut Tape, bind: &Bindings, fwd: &Forward, labels: &[usize], triplet_margin: Option<f64>) -> Result<Loss> {
        let mut per_head = Vec::with_capacity(fwd.features.len());
        for ((&f, &w), &nk) in fwd.features.iter().zip(&self.heads).zip(&self.necks) {
            let necked = tape.batch_norm(f, bind.var(nk), NECK_EPS)?;
            let logits = tape.matmul(necked, bind.var(w))?;
            let mut l = tape.cross_entropy(logits, labels)?;
            if let Some(m) = triplet_margin {
                let t = tape.batch_hard_triplet(f, labels, m)?;
                l = tape.add(l, t)?;
            }
            per_head.push(l);
        }
        let mut total = per_head[0];
        for &l in &per_head[1..] {
            total = tape.add(total, l)?;
        }
        Ok(Loss { total, per_head })
    }

    /// Inference embeddings `[B, feature_dim]`: head features concatenated.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &bind, images)?;
        let f = tape.concat(&fwd.features, 1)?;
        Ok(tape.value(f).clone())
    }

    /// Per-layer head-resolved attention `[heads, T, T]` of the global branch
    /// and the normalized final tokens `[N+1, D]` for one `[C, H, W]` image.
    pub fn inspect(&self, image: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let p = &self.config.patch;
        let batch = image.reshaped(&[1, p.channels, p.height, p.width])?;
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &bind, &batch)?;
        let mut layers = Vec::with_capacity(fwd.attention.len());
        for &a in &fwd.attention {
            let probs = tape.attention_probs(a).expect("attention node");
            let s = probs.shape();
            layers.push(probs.reshaped(&s[1..])?);
        }
        let tokens = tape.value(fwd.tokens);
        let s = tokens.shape();
        Ok((layers, tokens.reshaped(&s[1..])?))
    }
}

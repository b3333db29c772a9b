//! Small llama-style checkpoint triples for tests, demos and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::store::{Checkpoint, DType, Role, TensorRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Nest the anchor's backbone under `language_model.` like llava exports.
    pub anchor_prefix: bool,
    /// Add vision tower and projector tensors to the anchor.
    pub vision: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 8,
            intermediate: 12,
            vocab: 16,
            seed: 7,
            dtype: DType::F32,
            anchor_prefix: false,
            vision: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureTriple {
    pub base: Checkpoint,
    pub ml: Checkpoint,
    pub anchor: Checkpoint,
}

/// Backbone keys and shapes, in layer order.
pub fn backbone_layout(spec: &FixtureSpec) -> Vec<(String, Vec<usize>)> {
    let (h, f, v) = (spec.hidden, spec.intermediate, spec.vocab);
    let mut out = vec![("model.embed_tokens.weight".to_string(), vec![v, h])];
    for i in 0..spec.layers {
        let p = format!("model.layers.{i}");
        for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            out.push((format!("{p}.self_attn.{proj}.weight"), vec![h, h]));
        }
        out.push((format!("{p}.mlp.gate_proj.weight"), vec![f, h]));
        out.push((format!("{p}.mlp.up_proj.weight"), vec![f, h]));
        out.push((format!("{p}.mlp.down_proj.weight"), vec![h, f]));
        out.push((format!("{p}.input_layernorm.weight"), vec![h]));
        out.push((format!("{p}.post_attention_layernorm.weight"), vec![h]));
    }
    out.push(("model.norm.weight".to_string(), vec![h]));
    out.push(("lm_head.weight".to_string(), vec![v, h]));
    out
}

fn vision_layout(spec: &FixtureSpec) -> Vec<(String, Vec<usize>)> {
    vec![
        ("vision_tower.patch_embed.weight".into(), vec![4, 3, 2, 2]),
        ("vision_tower.blocks.0.attn.qkv.weight".into(), vec![12, 4]),
        ("vision_tower.blocks.0.norm.weight".into(), vec![4]),
        ("multi_modal_projector.linear_1.weight".into(), vec![spec.hidden, 4]),
        ("multi_modal_projector.linear_1.bias".into(), vec![spec.hidden]),
    ]
}

fn anchor_key(name: &str, prefixed: bool) -> String {
    if prefixed {
        format!("language_model.{name}")
    } else {
        name.to_string()
    }
}

/// Deterministic triple whose residuals differ in scale and direction per column.
pub fn fixture(spec: &FixtureSpec) -> Result<FixtureTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut base = Checkpoint::new(Role::Base);
    let mut ml = Checkpoint::new(Role::Multilingual);
    let mut anchor = Checkpoint::new(Role::Anchor);

    for (name, shape) in backbone_layout(spec) {
        let n: usize = shape.iter().product();
        let cols = *shape.last().unwrap();
        let col_scale: Vec<(f32, f32)> = (0..cols)
            .map(|_| (rng.gen_range(0.001..0.1), rng.gen_range(0.001..0.1)))
            .collect();
        let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut l = b.clone();
        let mut m = b.clone();
        for i in 0..n {
            let (sl, sm) = col_scale[i % cols];
            l[i] += sl * rng.gen_range(-1.0f32..1.0);
            m[i] += sm * rng.gen_range(-1.0f32..1.0);
        }
        base.insert(TensorRecord::from_f32(&*name, shape.clone(), &b, spec.dtype)?)?;
        ml.insert(TensorRecord::from_f32(&*name, shape.clone(), &l, spec.dtype)?)?;
        let key = anchor_key(&name, spec.anchor_prefix);
        anchor.insert(TensorRecord::from_f32(key, shape, &m, spec.dtype)?)?;
    }
    if spec.vision {
        for (name, shape) in vision_layout(spec) {
            let n: usize = shape.iter().product();
            let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            anchor.insert(TensorRecord::from_f32(name, shape, &v, spec.dtype)?)?;
        }
    }
    Ok(FixtureTriple { base, ml, anchor })
}

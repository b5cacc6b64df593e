//! Synthetic traces from an architectural description.
//!
//! Each transformer block expands to a fixed operator sequence
//! (norm, qkv projection, attention core, output projection, norm, MLP up,
//! MLP down), framed by an embedding operator and an LM-head operator.
//! Compute time is an analytic FLOP count divided by a calibrated
//! throughput; retained activations follow the usual per-layer
//! `34·bsh + 5·a·s²·b` byte count for fp16, split across the operators.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelTrace, OperatorRecord, TraceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Learned positions, tied LM head, LayerNorm, 4h GELU MLP with biases.
    #[default]
    Gpt,
    /// Rotary positions, untied head, RMSNorm, gated MLP, grouped KV heads.
    Llama,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_size: u64,
    pub n_blocks: usize,
    pub n_heads: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: u64,
    #[serde(default = "default_seq_len")]
    pub seq_len: u64,
    #[serde(default = "default_batch")]
    pub batch_size: u64,
    #[serde(default = "default_dtype")]
    pub dtype_bytes: u64,
    #[serde(default)]
    pub arch: Architecture,
    /// MLP intermediate width; `4·hidden_size` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<u64>,
    /// Key/value heads for grouped attention; `n_heads` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_kv_heads: Option<u64>,
}

fn default_vocab() -> u64 {
    50257
}
fn default_seq_len() -> u64 {
    1024
}
fn default_batch() -> u64 {
    8
}
fn default_dtype() -> u64 {
    2
}

impl ModelSpec {
    /// GPT-style spec with the default vocabulary, sequence length and fp16.
    pub fn gpt(hidden_size: u64, n_blocks: usize, n_heads: u64) -> Self {
        ModelSpec {
            hidden_size,
            n_blocks,
            n_heads,
            vocab_size: default_vocab(),
            seq_len: default_seq_len(),
            batch_size: default_batch(),
            dtype_bytes: default_dtype(),
            arch: Architecture::Gpt,
            ffn_hidden: None,
            n_kv_heads: None,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("n_blocks", self.n_blocks as u64),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
            ("dtype_bytes", self.dtype_bytes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TraceError::InvalidSpec(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(TraceError::InvalidSpec(
                "hidden_size must be divisible by n_heads".into(),
            ));
        }
        let kv = self.kv_heads();
        if kv == 0 || !self.n_heads.is_multiple_of(kv) {
            return Err(TraceError::InvalidSpec(
                "n_kv_heads must divide n_heads".into(),
            ));
        }
        if self.ffn_hidden == Some(0) {
            return Err(TraceError::InvalidSpec(
                "ffn_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    fn kv_heads(&self) -> u64 {
        self.n_kv_heads.unwrap_or(self.n_heads)
    }

    fn ffn(&self) -> u64 {
        self.ffn_hidden.unwrap_or(4 * self.hidden_size)
    }

    /// Parameter elements of one block's operators, in execution order.
    fn block_param_elems(&self) -> [u64; 7] {
        let h = self.hidden_size;
        let f = self.ffn();
        let kv_dim = h / self.n_heads * self.kv_heads();
        match self.arch {
            Architecture::Gpt => [
                2 * h,
                h * (h + 2 * kv_dim) + h + 2 * kv_dim,
                0,
                h * h + h,
                2 * h,
                h * f + f,
                f * h + h,
            ],
            Architecture::Llama => [h, h * (h + 2 * kv_dim), 0, h * h, h, 2 * h * f, f * h],
        }
    }

    fn embed_param_elems(&self) -> u64 {
        match self.arch {
            Architecture::Gpt => (self.vocab_size + self.seq_len) * self.hidden_size,
            Architecture::Llama => self.vocab_size * self.hidden_size,
        }
    }

    fn head_param_elems(&self) -> u64 {
        match self.arch {
            // The LM head shares the embedding matrix; it is counted at its
            // first use.
            Architecture::Gpt => 2 * self.hidden_size,
            Architecture::Llama => self.hidden_size + self.vocab_size * self.hidden_size,
        }
    }

    /// Total parameter elements the synthesized trace will carry.
    pub fn param_count(&self) -> u64 {
        let block: u64 = self.block_param_elems().iter().sum();
        self.embed_param_elems() + block * self.n_blocks as u64 + self.head_param_elems()
    }
}

/// Knobs that turn architectural counts into times and byte sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConstants {
    /// Effective compute throughput, FLOP/s.
    pub flops_per_sec: f64,
    /// Multiplier on the per-operator retained-activation byte counts.
    pub act_coeff: f64,
    /// Backward transient spike as a fraction of each operator's output bytes.
    pub temp_spike_fraction: f64,
    /// Residual allocation at the end of forward; logits size when absent.
    #[serde(default)]
    pub residual_bytes: Option<u64>,
}

impl Default for CalibrationConstants {
    fn default() -> Self {
        CalibrationConstants {
            flops_per_sec: 50e12,
            act_coeff: 1.0,
            temp_spike_fraction: 0.25,
            residual_bytes: None,
        }
    }
}

struct OpShape {
    name: &'static str,
    params: u64,
    flops: f64,
    /// Retained activation, in units of batch·seq·hidden elements.
    act_units: f64,
    /// Output size, in units of batch·seq·hidden elements.
    out_units: f64,
    /// Functional (unhookable) work preceding this operator.
    prior_spike: bool,
}

pub fn synthesize_trace(
    spec: &ModelSpec,
    calib: &CalibrationConstants,
) -> Result<ModelTrace, TraceError> {
    spec.validate()?;
    if !(calib.flops_per_sec.is_finite() && calib.flops_per_sec > 0.0) {
        return Err(TraceError::InvalidSpec(
            "flops_per_sec must be positive".into(),
        ));
    }
    if !(calib.act_coeff >= 0.0 && calib.temp_spike_fraction >= 0.0) {
        return Err(TraceError::InvalidSpec(
            "act_coeff and temp_spike_fraction must be non-negative".into(),
        ));
    }

    let h = spec.hidden_size as f64;
    let s = spec.seq_len as f64;
    let tokens = (spec.batch_size * spec.seq_len) as f64;
    let bsh_bytes = tokens * h * spec.dtype_bytes as f64;
    let f_ratio = spec.ffn() as f64 / h;
    let kv_ratio = spec.kv_heads() as f64 / spec.n_heads as f64;
    let gated = spec.arch == Architecture::Llama;
    let matmul = |weights: u64| 2.0 * tokens * weights as f64;
    let norm_flops = 5.0 * tokens * h;

    let bp = spec.block_param_elems();
    let block_ops = [
        OpShape {
            name: "ln_attn",
            params: bp[0],
            flops: norm_flops,
            act_units: 1.0,
            out_units: 1.0,
            prior_spike: true,
        },
        OpShape {
            name: "qkv_proj",
            params: bp[1],
            flops: matmul(spec.hidden_size * spec.hidden_size) * (1.0 + 2.0 * kv_ratio),
            act_units: 1.0,
            out_units: 1.0 + 2.0 * kv_ratio,
            prior_spike: false,
        },
        OpShape {
            name: "attn_core",
            params: bp[2],
            flops: 4.0 * tokens * s * h,
            act_units: 3.0 + 2.5 * spec.n_heads as f64 * s / h,
            out_units: 1.0,
            prior_spike: false,
        },
        OpShape {
            name: "attn_out",
            params: bp[3],
            flops: matmul(spec.hidden_size * spec.hidden_size),
            act_units: 1.5,
            out_units: 1.0,
            prior_spike: false,
        },
        OpShape {
            name: "ln_mlp",
            params: bp[4],
            flops: norm_flops,
            act_units: 1.0,
            out_units: 1.0,
            prior_spike: true,
        },
        OpShape {
            name: "mlp_up",
            params: bp[5],
            flops: matmul(spec.hidden_size * spec.ffn()) * if gated { 2.0 } else { 1.0 },
            act_units: 1.0 + f_ratio * if gated { 2.0 } else { 1.0 },
            out_units: f_ratio * if gated { 2.0 } else { 1.0 },
            prior_spike: false,
        },
        OpShape {
            name: "mlp_down",
            params: bp[6],
            flops: matmul(spec.hidden_size * spec.ffn()),
            act_units: f_ratio + 0.5,
            out_units: 1.0,
            prior_spike: false,
        },
    ];

    let embed = OpShape {
        name: "embedding",
        params: spec.embed_param_elems(),
        flops: tokens * h,
        act_units: 0.0,
        out_units: 1.0,
        prior_spike: false,
    };
    let head = OpShape {
        name: "lm_head",
        params: spec.head_param_elems(),
        flops: norm_flops + matmul(spec.hidden_size * spec.vocab_size),
        act_units: 1.0,
        out_units: spec.vocab_size as f64 / h,
        prior_spike: true,
    };

    let mut ops = Vec::with_capacity(2 + 7 * spec.n_blocks);
    let mut push = |shape: &OpShape, block_id: Option<usize>, prefix: String| {
        let t_fwd = shape.flops / calib.flops_per_sec;
        let spike = (calib.temp_spike_fraction * shape.out_units * bsh_bytes).round() as i64;
        let index = ops.len();
        ops.push(OperatorRecord {
            index,
            name: format!("{prefix}{}", shape.name),
            block_id,
            t_fwd,
            t_bwd: 2.0 * t_fwd,
            param_bytes: shape.params * spec.dtype_bytes,
            act_bytes: (calib.act_coeff * shape.act_units * bsh_bytes).round() as u64,
            d_cur_prior: 0,
            d_peak_prior: if shape.prior_spike { spike } else { 0 },
            d_cur_op: 0,
            d_peak_op: spike,
        });
    };

    push(&embed, None, String::new());
    for b in 0..spec.n_blocks {
        for shape in &block_ops {
            push(shape, Some(b), format!("block{b}."));
        }
    }
    push(&head, None, String::new());

    let residual = calib
        .residual_bytes
        .unwrap_or(spec.batch_size * spec.seq_len * spec.vocab_size * spec.dtype_bytes);

    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthetic".into());
    meta.insert(
        "arch".into(),
        serde_json::to_value(spec.arch).unwrap_or_default(),
    );
    meta.insert("hidden_size".into(), spec.hidden_size.into());
    meta.insert("n_heads".into(), spec.n_heads.into());
    meta.insert("batch_size".into(), spec.batch_size.into());
    meta.insert("seq_len".into(), spec.seq_len.into());
    meta.insert("dtype_bytes".into(), spec.dtype_bytes.into());
    meta.insert("param_count".into(), spec.param_count().into());

    let trace = ModelTrace {
        meta,
        m_fwd: residual,
        n_blocks: spec.n_blocks,
        ops,
    };
    trace.validate()?;
    Ok(trace)
}

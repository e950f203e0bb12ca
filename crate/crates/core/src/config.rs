//! Network topology and its shape validation.
//!
//! A configuration lists the input frame size, the input (`k_if`) and output
//! (`k_fo`) kernels, and the context layers bottom-up. Validation derives, for
//! every pathway, the kernel size and zero padding that map its source onto
//! its target. Padding is only ever applied when the source map is strictly
//! smaller than the target; a source at least as large as the target must be
//! reduced by a valid correlation of exactly the right size.
//!
//! Configs round-trip through TOML:
//!
//! ```toml
//! input_size = [16, 16]
//! input_kernel = [5, 5]
//! output_kernel = [5, 5]
//!
//! [[layers]]
//! tau = 2.0
//! fm_size = [12, 12]
//! fm_count = 4
//! cm_size = [8, 8]
//! cm_count = 4
//! fm_kernel = [5, 5]
//! # optional: cm_kernel (CM -> FM), bottomup_kernel (FM below -> CM)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{topology, Error, Result};
use crate::tensor::{resolve_padding_1d, PadSpec};

pub type Size2 = [usize; 2];

/// One context layer: its feature maps (FMs) and context maps (CMs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub tau: f64,
    pub fm_size: Size2,
    pub fm_count: usize,
    pub cm_size: Size2,
    pub cm_count: usize,
    /// Kernel of the top-down pathway producing this layer's FMs from the FMs above.
    pub fm_kernel: Size2,
    /// Kernel of the CM -> FM pathway inside the layer; derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cm_kernel: Option<Size2>,
    /// Kernel of the bottom-up pathway into this layer's CMs; derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottomup_kernel: Option<Size2>,
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: Size2,
    pub input_kernel: Size2,
    pub output_kernel: Size2,
    /// Multiplier on the uniform initialisation bound `1/sqrt(fan_in)`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    pub layers: Vec<LayerSpec>,
}

/// One convolutional pathway after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvPlan {
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel: (usize, usize),
    pub pad: PadSpec,
}

impl ConvPlan {
    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

/// Derived shapes of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub tau: f64,
    pub fm_count: usize,
    pub fm_size: (usize, usize),
    pub cm_count: usize,
    pub cm_size: (usize, usize),
    /// FM(l+1) -> FM(l); absent for the top layer.
    pub k_ff: Option<ConvPlan>,
    /// CM(l) -> FM(l).
    pub k_cf: ConvPlan,
    /// FM(l-1) (or the input frame) -> CM(l).
    pub k_fc: ConvPlan,
    /// Whether FM(l+1) feeds CM(l) element-wise.
    pub has_w_fc: bool,
}

impl LayerPlan {
    pub fn decay(&self) -> f64 {
        1.0 - 1.0 / self.tau
    }
}

/// Every kernel/weight dimension and padding implied by a valid config.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePlan {
    pub input_size: (usize, usize),
    pub k_if: ConvPlan,
    pub k_fo: ConvPlan,
    pub layers: Vec<LayerPlan>,
}

impl ShapePlan {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frame_len(&self) -> usize {
        self.input_size.0 * self.input_size.1
    }
}

fn tuple(s: Size2) -> (usize, usize) {
    (s[0], s[1])
}

fn derive_axis(src: usize, dst: usize, fallback: usize) -> usize {
    if src >= dst {
        src - dst + 1
    } else {
        fallback
    }
}

fn derive_kernel(src: (usize, usize), dst: (usize, usize), fallback: Size2) -> Size2 {
    [derive_axis(src.0, dst.0, fallback[0]), derive_axis(src.1, dst.1, fallback[1])]
}

fn connect(
    name: &str,
    in_maps: usize,
    out_maps: usize,
    src: (usize, usize),
    dst: (usize, usize),
    kernel: Size2,
) -> Result<ConvPlan> {
    let axis = |s: usize, d: usize, k: usize| -> Result<(usize, usize)> {
        if k == 0 {
            return topology(format!("{name}: kernel size must be positive"));
        }
        if s >= d {
            if s + 1 != d + k {
                return topology(format!(
                    "{name}: source {s} is not smaller than target {d}, so it must be a valid \
                     correlation, but kernel {k} yields {}",
                    (s + 1).saturating_sub(k)
                ));
            }
            Ok((0, 0))
        } else {
            resolve_padding_1d(s, d, k).map_err(|e| Error::Topology(format!("{name}: {e}")))
        }
    };
    let (top, bottom) = axis(src.0, dst.0, kernel[0])?;
    let (left, right) = axis(src.1, dst.1, kernel[1])?;
    Ok(ConvPlan {
        in_maps,
        out_maps,
        kernel: (kernel[0], kernel[1]),
        pad: PadSpec { top, bottom, left, right },
    })
}

fn positive(name: &str, s: Size2) -> Result<()> {
    if s[0] == 0 || s[1] == 0 {
        return topology(format!("{name} {}x{} must be positive", s[0], s[1]));
    }
    Ok(())
}

/// Validates a configuration and derives its [`ShapePlan`].
pub fn validate_config(cfg: &NetworkConfig) -> Result<ShapePlan> {
    if cfg.layers.is_empty() {
        return topology("network needs at least one layer");
    }
    if !(cfg.init_scale.is_finite() && cfg.init_scale >= 0.0) {
        return Err(Error::InvalidArgument("init_scale must be finite and non-negative".into()));
    }
    positive("input_size", cfg.input_size)?;
    let input = tuple(cfg.input_size);
    let n = cfg.layers.len();
    let mut layers = Vec::with_capacity(n);
    for (idx, spec) in cfg.layers.iter().enumerate() {
        let l = idx + 1;
        if !(spec.tau.is_finite() && spec.tau >= 1.0) {
            return topology(format!("layer {l}: time constant {} must be >= 1", spec.tau));
        }
        if spec.fm_count == 0 {
            return topology(format!("layer {l}: needs at least one feature map"));
        }
        positive(&format!("layer {l} fm_size"), spec.fm_size)?;
        positive(&format!("layer {l} cm_size"), spec.cm_size)?;
        let fm = tuple(spec.fm_size);
        let cm = tuple(spec.cm_size);
        let above = cfg.layers.get(idx + 1);

        let k_ff = match above {
            Some(up) => Some(connect(
                &format!("k_ff FM{} -> FM{l}", l + 1),
                up.fm_count,
                spec.fm_count,
                tuple(up.fm_size),
                fm,
                spec.fm_kernel,
            )?),
            None => None,
        };

        let k_cf_kernel = spec.cm_kernel.unwrap_or_else(|| derive_kernel(cm, fm, spec.fm_kernel));
        let k_cf = connect(&format!("k_cf CM{l} -> FM{l}"), spec.cm_count, spec.fm_count, cm, fm, k_cf_kernel)?;

        let (below_maps, below_size, below_name) = if idx == 0 {
            (1, input, "input".to_string())
        } else {
            let b = &cfg.layers[idx - 1];
            (b.fm_count, tuple(b.fm_size), format!("FM{}", l - 1))
        };
        let k_fc_kernel = spec.bottomup_kernel.unwrap_or_else(|| derive_kernel(below_size, cm, spec.fm_kernel));
        let k_fc = connect(
            &format!("k_fc {below_name} -> CM{l}"),
            below_maps,
            spec.cm_count,
            below_size,
            cm,
            k_fc_kernel,
        )?;

        let has_w_fc = match above {
            Some(up) if spec.cm_count > 0 => {
                if spec.cm_size != up.fm_size {
                    return topology(format!(
                        "W_fc FM{} -> CM{l}: element-wise term needs CM{l} size {:?} to equal FM{} size {:?}",
                        l + 1,
                        spec.cm_size,
                        l + 1,
                        up.fm_size
                    ));
                }
                true
            }
            _ => false,
        };

        layers.push(LayerPlan {
            tau: spec.tau,
            fm_count: spec.fm_count,
            fm_size: fm,
            cm_count: spec.cm_count,
            cm_size: cm,
            k_ff,
            k_cf,
            k_fc,
            has_w_fc,
        });
    }
    let fm1 = &cfg.layers[0];
    let k_if = connect("k_if input -> FM1", 1, fm1.fm_count, input, tuple(fm1.fm_size), cfg.input_kernel)?;
    let k_fo = connect("k_fo FM1 -> output", fm1.fm_count, 1, tuple(fm1.fm_size), input, cfg.output_kernel)?;
    Ok(ShapePlan { input_size: input, k_if, k_fo, layers })
}

impl NetworkConfig {
    /// Seven-layer network on 36x36 frames with time constants 2..64.
    pub fn full_scale() -> Self {
        let layer = |tau: f64, fm: usize, fmn: usize, k: usize, cm: usize, cmn: usize, kcf: usize, kfc: usize| LayerSpec {
            tau,
            fm_size: [fm, fm],
            fm_count: fmn,
            cm_size: [cm, cm],
            cm_count: cmn,
            fm_kernel: [k, k],
            cm_kernel: Some([kcf, kcf]),
            bottomup_kernel: Some([kfc, kfc]),
        };
        NetworkConfig {
            input_size: [36, 36],
            input_kernel: [5, 5],
            output_kernel: [5, 5],
            init_scale: 1.0,
            layers: vec![
                layer(2.0, 32, 10, 7, 26, 10, 7, 11),
                layer(4.0, 26, 10, 7, 20, 10, 7, 13),
                layer(8.0, 20, 20, 9, 12, 10, 9, 15),
                layer(16.0, 12, 40, 11, 2, 25, 11, 19),
                layer(32.0, 2, 10, 2, 1, 10, 2, 12),
                layer(64.0, 1, 10, 1, 1, 5, 1, 2),
            ],
        }
    }

    /// Three-layer desk-scale network on 16x16 frames.
    pub fn toy() -> Self {
        let layer = |tau: f64, fm: usize, fmn: usize, cm: usize, cmn: usize, k: usize| LayerSpec {
            tau,
            fm_size: [fm, fm],
            fm_count: fmn,
            cm_size: [cm, cm],
            cm_count: cmn,
            fm_kernel: [k, k],
            cm_kernel: None,
            bottomup_kernel: None,
        };
        NetworkConfig {
            input_size: [16, 16],
            input_kernel: [5, 5],
            output_kernel: [5, 5],
            init_scale: 1.0,
            layers: vec![layer(2.0, 12, 4, 8, 4, 5), layer(4.0, 8, 4, 4, 4, 5), layer(8.0, 4, 2, 1, 2, 3)],
        }
    }

    /// Sets every layer's time constant to `base * 2^(l-1)`.
    pub fn with_doubling_taus(mut self, base: f64) -> Self {
        let mut tau = base;
        for l in &mut self.layers {
            l.tau = tau;
            tau *= 2.0;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn frame_size(&self) -> (usize, usize) {
        tuple(self.input_size)
    }
}

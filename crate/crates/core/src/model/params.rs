use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderConfig, EncoderParams, MhaParams};
use crate::error::{KktError, Result};
use crate::tensor::{ParamId, ParamStore};

/// Which refinement paths feed the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Key-turn and knowledge paths.
    Full,
    /// Key-turn path only.
    Kt,
    /// Knowledge path only.
    K,
    /// Plain dual co-attention over the whole context.
    Base,
    /// Full wiring, but only the selected key turns are encoded as context.
    KeyturnsOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::Kt,
        Ablation::K,
        Ablation::Base,
        Ablation::KeyturnsOnly,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Ablation::Full => 0,
            Ablation::Kt => 1,
            Ablation::K => 2,
            Ablation::Base => 3,
            Ablation::KeyturnsOnly => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| KktError::Checkpoint(format!("unknown ablation tag {tag}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Kt => "kt",
            Ablation::K => "k",
            Ablation::Base => "base",
            Ablation::KeyturnsOnly => "keyturns-only",
        }
    }

    pub fn uses_key_turns(self) -> bool {
        !matches!(self, Ablation::K | Ablation::Base)
    }

    pub fn uses_knowledge(self) -> bool {
        !matches!(self, Ablation::Kt | Ablation::Base)
    }

    /// Width of the input to the fusion map, in units of d_model.
    fn fusion_in(self) -> Option<usize> {
        match self {
            Ablation::Base => None,
            Ablation::Kt | Ablation::K => Some(2),
            Ablation::Full | Ablation::KeyturnsOnly => Some(4),
        }
    }

    /// Whether parameters trained under `self` can be evaluated as `other`.
    /// Full and keyturns-only share one parameter layout.
    pub fn compatible_with(self, other: Ablation) -> bool {
        let norm = |a: Ablation| if a == Ablation::KeyturnsOnly { Ablation::Full } else { a };
        norm(self) == norm(other)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = KktError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| KktError::Config(format!("unknown ablation {s:?} (full|kt|k|base|keyturns-only)")))
    }
}

/// All learnable weights of the reader.
#[derive(Clone, Debug)]
pub struct KktParams {
    pub ablation: Ablation,
    pub encoder: EncoderParams,
    /// Self-attention applied to encoded fact tokens before mean pooling.
    pub fact_sa: MhaParams,
    pub refine_kt: MhaParams,
    pub refine_ck: MhaParams,
    pub refine_qak: MhaParams,
    /// Context queries over QA keys.
    pub duma_c: MhaParams,
    /// QA queries over context keys.
    pub duma_qa: MhaParams,
    pub fusion_w: Option<ParamId>,
    pub fusion_b: Option<ParamId>,
    /// Decoder vector, `[4·d_model]` (or `[2·d_model]` for the base model).
    pub out_w: ParamId,
}

impl KktParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, ablation: Ablation, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        let h = config.heads;
        let encoder = EncoderParams::new(store, "enc", config, rng)?;
        let fact_sa = MhaParams::new(store, "fact_sa", d, h, rng)?;
        let refine_kt = MhaParams::new(store, "refine.kt", d, h, rng)?;
        let refine_ck = MhaParams::new(store, "refine.ck", d, h, rng)?;
        let refine_qak = MhaParams::new(store, "refine.qak", d, h, rng)?;
        let duma_c = MhaParams::new(store, "duma.c", d, h, rng)?;
        let duma_qa = MhaParams::new(store, "duma.qa", d, h, rng)?;
        let (fusion_w, fusion_b) = match ablation.fusion_in() {
            Some(m) => (
                Some(store.add_uniform("fusion.w", &[m * d, 2 * d], m * d, rng)),
                Some(store.add_uniform("fusion.b", &[2 * d], m * d, rng)),
            ),
            None => (None, None),
        };
        let out_dim = if ablation == Ablation::Base { 2 * d } else { 4 * d };
        let out_w = store.add_uniform("out.w", &[out_dim], out_dim, rng);
        Ok(Self {
            ablation,
            encoder,
            fact_sa,
            refine_kt,
            refine_ck,
            refine_qak,
            duma_c,
            duma_qa,
            fusion_w,
            fusion_b,
            out_w,
        })
    }

    /// Rebinds to the tensors of a loaded checkpoint, checking that their
    /// shapes fit `ablation`.
    pub fn lookup(store: &ParamStore, ablation: Ablation) -> Result<Self> {
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| KktError::Checkpoint(format!("missing tensor {name}")))
        };
        let encoder = EncoderParams::lookup(store, "enc")?;
        let d = encoder.d_model();
        let (fusion_w, fusion_b) = match ablation.fusion_in() {
            Some(m) => {
                let w = find("fusion.w")?;
                if store.get(w).shape() != [m * d, 2 * d] {
                    return Err(KktError::Checkpoint(format!(
                        "fusion.w has shape {:?}, ablation {ablation} needs {:?}",
                        store.get(w).shape(),
                        [m * d, 2 * d]
                    )));
                }
                (Some(w), Some(find("fusion.b")?))
            }
            None => (None, None),
        };
        let out_w = find("out.w")?;
        let out_dim = if ablation == Ablation::Base { 2 * d } else { 4 * d };
        if store.get(out_w).shape() != [out_dim] {
            return Err(KktError::Checkpoint(format!(
                "out.w has shape {:?}, ablation {ablation} needs [{out_dim}]",
                store.get(out_w).shape()
            )));
        }
        Ok(Self {
            ablation,
            encoder,
            fact_sa: MhaParams::lookup(store, "fact_sa")?,
            refine_kt: MhaParams::lookup(store, "refine.kt")?,
            refine_ck: MhaParams::lookup(store, "refine.ck")?,
            refine_qak: MhaParams::lookup(store, "refine.qak")?,
            duma_c: MhaParams::lookup(store, "duma.c")?,
            duma_qa: MhaParams::lookup(store, "duma.qa")?,
            fusion_w,
            fusion_b,
            out_w,
        })
    }

    pub fn d_model(&self) -> usize {
        self.encoder.d_model()
    }

    /// Same parameters wired as a compatible ablation.
    pub fn rewired(&self, ablation: Ablation) -> Result<Self> {
        if !self.ablation.compatible_with(ablation) {
            return Err(KktError::Config(format!(
                "parameters trained as {} cannot run as {ablation}",
                self.ablation
            )));
        }
        Ok(Self {
            ablation,
            ..self.clone()
        })
    }
}

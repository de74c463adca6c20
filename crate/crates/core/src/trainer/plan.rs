/// Components trained and frozen by one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: u8,
    pub trainable: Vec<&'static str>,
    pub frozen: Vec<&'static str>,
}

impl StagePlan {
    pub fn for_stage(stage: u8, freeze_encoder: bool) -> Self {
        match stage {
            1 => Self { stage, trainable: vec!["enc_q", "dec_q", "codebooks", "disc"], frozen: vec![] },
            2 => Self { stage, trainable: vec!["enc_r", "wpred", "dec_r", "disc"], frozen: vec!["codebooks"] },
            _ => {
                let mut plan = Self {
                    stage: 3,
                    trainable: vec!["enc_r", "dec_e", "faff", "disc"],
                    frozen: vec!["codebooks", "wpred", "dec_r"],
                };
                if freeze_encoder {
                    plan.trainable.retain(|c| *c != "enc_r");
                    plan.frozen.push("enc_r");
                }
                plan
            }
        }
    }

    pub fn is_trainable(&self, component: &str) -> bool {
        self.trainable.contains(&component)
    }

    pub fn is_frozen(&self, component: &str) -> bool {
        self.frozen.contains(&component)
    }

    /// Components whose arrays the stage carries in its checkpoint.
    pub fn components(&self) -> impl Iterator<Item = &&'static str> {
        self.trainable.iter().chain(&self.frozen)
    }
}

/// Component owning a parameter. Channel-attention blocks `gcam/<i>` belong
/// to the raw decoder for `i < levels` and to the enhancement decoder after.
pub fn component_of(name: &str, levels: usize) -> &str {
    let head = crate::params::component(name);
    match head {
        "codebook" => "codebooks",
        "gcam" => {
            let idx: usize = name.split('/').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            if idx < levels {
                "dec_r"
            } else {
                "dec_e"
            }
        }
        other => other,
    }
}

/// Whether an array name is model state (as opposed to optimizer or loop
/// bookkeeping).
pub fn is_model_array(name: &str) -> bool {
    !(name.starts_with("optim/") || name.starts_with("train/"))
}

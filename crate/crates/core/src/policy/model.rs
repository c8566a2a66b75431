use rand::Rng;

use super::{ActionKind, ActionSchema};
use crate::error::Result;
use crate::gnn::{register_step, GnnConfig};
use crate::numerics::{ParameterStore, Real};

pub const VALUE_HEAD: &str = "value";
pub(crate) const SCHEMA_HEAD: &str = "policy.schema";

/// Refinement steps run after the one-hot augmentation at levels two and up.
pub(crate) const LEVEL_MP_STEPS: usize = 2;

/// Encoder configuration plus the action vocabulary of a domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub gnn: GnnConfig,
    pub schemas: Vec<ActionSchema>,
}

pub(crate) fn level_prefix(schema: usize, level: usize) -> String {
    format!("policy.s{schema}.p{level}")
}

pub(crate) fn set_head(schema: usize) -> String {
    format!("policy.s{schema}.set")
}

impl PolicyModel {
    pub fn new(gnn: GnnConfig, schemas: Vec<ActionSchema>) -> Self {
        for (i, s) in schemas.iter().enumerate() {
            assert_eq!(s.id, i, "schema ids must equal their position");
        }
        Self { gnn, schemas }
    }

    pub fn emb_size(&self) -> usize {
        self.gnn.emb_size
    }

    /// Registers encoder, decoder and value-head parameters with fresh initial values.
    pub fn register<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let e = self.emb_size();
        self.gnn.register(store, rng)?;
        store.add_linear(SCHEMA_HEAD, e, self.schemas.len(), rng)?;
        for s in &self.schemas {
            match s.kind {
                ActionKind::Elementary => {}
                ActionKind::Parametric { arity } => {
                    for l in 1..=arity {
                        let prefix = level_prefix(s.id, l);
                        if l >= 2 {
                            store.add_linear(&format!("{prefix}.augment"), e + l - 1, e, rng)?;
                            for j in 0..LEVEL_MP_STEPS {
                                register_step(store, &format!("{prefix}.mp{j}"), &self.gnn.shape, e, rng)?;
                            }
                        }
                        store.add_linear(&format!("{prefix}.score"), e, 1, rng)?;
                    }
                }
                ActionKind::Set => store.add_linear(&set_head(s.id), e, 1, rng)?,
            }
        }
        store.add_linear(VALUE_HEAD, e, 1, rng)
    }

    /// A freshly initialized parameter store for this model.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        self.register(&mut store, rng)?;
        Ok(store)
    }
}

//! Model assembly: parameter initialization from a config, conv-feature
//! precomputation, and per-pair cache construction.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::ImageParts;
use crate::error::Result;
use crate::factors::{self, PairInputs, PairScoreCache, PartNameTable};
use crate::nets;
use crate::params::{ParamStore, TapeBinding};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub struct Model {
    pub store: ParamStore,
    pub table: PartNameTable,
    pub dual_encoder: bool,
}

impl Model {
    /// Seeded initialization of every parameter group.
    pub fn init(cfg: &RunConfig, name_counts: &BTreeMap<String, usize>) -> Model {
        let table = PartNameTable::from_counts(name_counts);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        nets::init_encoder(&mut store, "enc", &mut rng);
        if cfg.dual_encoder {
            nets::init_encoder(&mut store, "enc_t", &mut rng);
        }
        nets::init_context(&mut store, "ctx", &mut rng);
        factors::init_factors(&mut store, &mut rng);
        table.init_params(&mut store, &mut rng);
        Model {
            store,
            table,
            dual_encoder: cfg.dual_encoder,
        }
    }

    /// Conv-stage features (K, 6144) for one image's patches, value only.
    pub fn conv_features(&self, patches: &[Vec<f64>], prefix: &str) -> Result<Vec<f64>> {
        let k = patches.len();
        let mut data = Vec::with_capacity(k * 32 * 32);
        for p in patches {
            data.extend_from_slice(p);
        }
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let leaf = tape.leaf(Tensor::from_vec(&[k, 1, 32, 32], data)?);
        let feats = nets::encoder_conv_forward(&mut tape, &mut binding, &self.store, prefix, leaf)?;
        Ok(tape.value(feats).data().to_vec())
    }

    /// Encoder embeddings (K, 64) for one image, value only.
    pub fn embeddings(&self, patches: &[Vec<f64>], prefix: &str) -> Result<Vec<f64>> {
        let k = patches.len();
        let mut data = Vec::with_capacity(k * 32 * 32);
        for p in patches {
            data.extend_from_slice(p);
        }
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let leaf = tape.leaf(Tensor::from_vec(&[k, 1, 32, 32], data)?);
        let emb = nets::encode_patches(&mut tape, &mut binding, &self.store, prefix, leaf)?;
        Ok(tape.value(emb).data().to_vec())
    }

    pub fn pair_inputs<'a>(src: &'a ImageParts, tgt: &'a ImageParts) -> PairInputs<'a> {
        PairInputs {
            src_patches: &src.patches,
            src_locs: &src.locs,
            src_names: &src.names,
            tgt_patches: &tgt.patches,
            tgt_locs: &tgt.locs,
        }
    }

    /// Full per-pair score tables on a fresh tape; identity LSTM order.
    pub fn pair_cache(
        &self,
        inputs: &PairInputs,
        cached_conv: Option<(&[f64], &[f64])>,
    ) -> Result<(Tape, TapeBinding, PairScoreCache)> {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let so: Vec<usize> = (0..inputs.src_patches.len()).collect();
        let to: Vec<usize> = (0..inputs.tgt_patches.len()).collect();
        let cache = factors::build_pair_cache(
            &mut tape,
            &mut binding,
            &self.store,
            &self.table,
            inputs,
            &so,
            &to,
            self.dual_encoder,
            cached_conv,
        )?;
        Ok((tape, binding, cache))
    }
}

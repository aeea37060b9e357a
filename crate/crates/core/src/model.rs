//! The assembled network: backbone → CDAP → HPPM, plus its loss terms.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::backbone::{Backbone, FeaturePyramid};
use crate::cdap::{Cdap, SharedPrivateBundle};
use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry;
use crate::hppm::{Hppm, RegistrationResult};
use crate::losses::{self, LossTerms};
use crate::nn::ParamStore;
use crate::synthdata::PairBatch;

pub struct HrNet {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub cdap: Option<Cdap>,
    pub hppm: Hppm,
    pub config: RunConfig,
}

#[derive(Clone)]
pub struct ForwardOutput {
    pub pyr_f: FeaturePyramid,
    pub pyr_m: FeaturePyramid,
    pub bundle: Option<SharedPrivateBundle>,
    pub reg: RegistrationResult,
    /// Moving image warped by the final field.
    pub registered: Tensor,
    /// Moving image warped by the composite rigid estimate alone.
    pub rigid_registered: Option<Tensor>,
}

impl HrNet {
    pub fn new(config: &RunConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, dtype);
        let backbone = Backbone::new(&mut store, config.backbone_config())?;
        let (cdap, dims) = if config.model.cdap {
            let c = Cdap::new(&mut store, config.cdap_config())?;
            let d = c.out_dims()?;
            (Some(c), d)
        } else {
            (None, config.model.widths)
        };
        let hppm = Hppm::new(&mut store, &dims, config.hppm)?;
        Ok(Self { store, backbone, cdap, hppm, config: config.clone() })
    }

    pub fn forward(&self, fixed: &Tensor, moving: &Tensor, train: bool) -> Result<ForwardOutput> {
        let (pyr_f, pyr_m) = self.backbone.encode_pair(fixed, moving, train)?;
        let bundle = match &self.cdap {
            Some(c) => Some(c.forward(&pyr_f, &pyr_m)?),
            None => None,
        };
        let reg = match &bundle {
            Some(b) => self.hppm.forward(&b.proj_f, &b.proj_m)?,
            None => self.hppm.forward(&pyr_f.levels, &pyr_m.levels)?,
        };
        let registered = geometry::warp_tensor(moving, &reg.final_field)?;
        let rigid_registered = match &reg.rigid_params {
            Some(p) => {
                let (_, h, w, _) = moving.dims4()?;
                Some(geometry::warp_tensor(moving, &geometry::rigid_flow_tensor(p, h, w)?)?)
            }
            None => None,
        };
        Ok(ForwardOutput { pyr_f, pyr_m, bundle, reg, registered, rigid_registered })
    }

    /// All enabled loss terms for a forward pass against a supervised batch.
    pub fn loss_terms(&self, out: &ForwardOutput, batch: &PairBatch) -> Result<LossTerms> {
        let lc = &self.config.losses;
        let mut terms = LossTerms::default();
        if let (Some(p), Some(img)) = (&out.reg.rigid_params, &out.rigid_registered) {
            terms.r = Some(losses::loss_rigid(
                &geometry::normalize_params_tensor(p)?,
                &geometry::normalize_params_tensor(&batch.gt_params)?,
                img,
                &batch.gt_rigid_image,
            )?);
        }
        terms.n = Some(losses::loss_nonrigid(
            &out.reg.final_field,
            &batch.gt_field,
            &out.registered,
            &batch.gt_registered,
        )?);
        terms.s = Some(losses::loss_smooth(&out.reg.final_field)?);
        if let Some(b) = &out.bundle {
            if lc.tri {
                terms.tri = Some(losses::loss_tri(&b.proj_f, &b.proj_m, &b.private_f, &b.private_m, lc.margin)?);
            }
            if lc.cs {
                let m = if lc.cs_both_modalities { Some(b.proj_m.as_slice()) } else { None };
                terms.cs = Some(losses::loss_cs(&b.proj_f, m)?);
            }
            if lc.ccd {
                terms.ccd = Some(losses::loss_ccd(
                    &b.proj_f,
                    &b.private_f,
                    &b.proj_m,
                    &b.private_m,
                    &lc.ccd_scale_weights,
                )?);
            }
            if lc.bo {
                terms.bo = Some(losses::loss_bo(&b.bases_raw)?);
            }
        }
        Ok(terms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        self.store.load(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::synthdata::{generate_pairs, RigidRanges, SynthConfig};

    fn small_config() -> RunConfig {
        RunConfig::default()
            .with_overrides(&["image_size=32", "model.widths=[4,8,8,8,8]"])
            .unwrap()
    }

    #[test]
    fn identity_pairs_are_left_untouched() {
        let cfg = small_config();
        let net = HrNet::new(&cfg, DType::F32).unwrap();
        let synth = SynthConfig {
            image_size: 32,
            rigid: RigidRanges::zero(),
            elastic_alpha: 0.0,
            ..SynthConfig::default()
        };
        let pairs = generate_pairs(&synth, None, 3, 2).unwrap();
        let batch = PairBatch::from_pairs(&pairs, DType::F32).unwrap();
        let out = net.forward(&batch.fixed, &batch.moving, false).unwrap();
        assert!(to_f64_vec(&out.reg.final_field).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(to_f64_vec(&out.registered).unwrap(), to_f64_vec(&batch.moving).unwrap());
    }

    #[test]
    fn gradients_reach_every_component() {
        let cfg = small_config();
        let net = HrNet::new(&cfg, DType::F32).unwrap();
        let synth = SynthConfig { image_size: 32, ..SynthConfig::default() };
        let pairs = generate_pairs(&synth, None, 1, 2).unwrap();
        let batch = PairBatch::from_pairs(&pairs, DType::F32).unwrap();
        let out = net.forward(&batch.fixed, &batch.moving, true).unwrap();
        let terms = net.loss_terms(&out, &batch).unwrap();
        let total = losses::total_loss(&terms, &losses::curriculum(0.5)).unwrap().unwrap();
        let grads = total.backward().unwrap();
        for prefix in ["backbone.", "msbn.", "cdap.", "hppm."] {
            let reached = net.store.params().filter(|(k, _)| k.starts_with(prefix)).any(|(_, v)| {
                grads
                    .get(v.as_tensor())
                    .map(|g| to_f64_vec(g).unwrap().iter().any(|x| *x != 0.0))
                    .unwrap_or(false)
            });
            assert!(reached, "no gradient reached {prefix}*");
        }
    }
}

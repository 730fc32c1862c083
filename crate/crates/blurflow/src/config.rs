//! Run configuration: a flat key=value file mapped onto the pipeline
//! settings, with warnings for unknown keys.

use std::collections::BTreeMap;

use crate::pipeline::PipelineConfig;
use crate::{Error, Result};

const KNOWN_KEYS: &[&str] = &[
    "theta1",
    "theta2",
    "theta3",
    "theta4",
    "theta5",
    "lambda",
    "alpha1",
    "alpha2",
    "alpha3",
    "theta_r",
    "theta_t",
    "w_label_depth",
    "w_label_motion",
    "gamma",
    "eta",
    "tau",
    "n_latent",
    "outer_iters",
    "superpixels",
    "num_objects",
    "max_disp",
    "kernel_radius",
    "ransac_threshold",
    "max_matches",
    "pd_iters",
    "pd_tol",
    "seed",
    "two_frame",
    "plane_candidates",
    "motion_candidates",
    "plane_sigma_rel",
    "plane_sigma_abs",
    "rot_sigma_deg",
    "trans_sigma_rel",
    "trans_sigma_abs",
    "trws_passes",
    "sceneflow_rounds",
];

/// Parsed run configuration plus warnings about ignored keys.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub warnings: Vec<String>,
}

impl RunConfig {
    pub fn from_key_values(kv: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = PipelineConfig::default();
        let mut warnings = Vec::new();
        for key in kv.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                warnings.push(format!("unknown config key ignored: {key}"));
            }
        }
        let f = |key: &str| -> Result<Option<f64>> {
            kv.get(key)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad float for {key}: {v}")))
                })
                .transpose()
        };
        let u = |key: &str| -> Result<Option<usize>> {
            kv.get(key)
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad integer for {key}: {v}")))
                })
                .transpose()
        };
        let b = |key: &str| -> Result<Option<bool>> {
            kv.get(key)
                .map(|v| match v.as_str() {
                    "true" | "1" | "yes" => Ok(true),
                    "false" | "0" | "no" => Ok(false),
                    _ => Err(Error::Config(format!("bad boolean for {key}: {v}"))),
                })
                .transpose()
        };

        macro_rules! set_f {
            ($field:expr, $key:literal) => {
                if let Some(v) = f($key)? {
                    $field = v;
                }
            };
        }
        macro_rules! set_u {
            ($field:expr, $key:literal) => {
                if let Some(v) = u($key)? {
                    $field = v;
                }
            };
        }
        set_f!(cfg.params.theta1, "theta1");
        set_f!(cfg.params.theta2, "theta2");
        set_f!(cfg.params.theta3, "theta3");
        set_f!(cfg.params.theta4, "theta4");
        set_f!(cfg.params.theta5, "theta5");
        set_f!(cfg.params.lambda, "lambda");
        set_f!(cfg.params.alpha1, "alpha1");
        set_f!(cfg.params.alpha2, "alpha2");
        set_f!(cfg.params.alpha3, "alpha3");
        set_f!(cfg.params.theta_r, "theta_r");
        set_f!(cfg.params.theta_t, "theta_t");
        set_f!(cfg.params.w_label_depth, "w_label_depth");
        set_f!(cfg.params.w_label_motion, "w_label_motion");
        set_f!(cfg.params.gamma, "gamma");
        set_f!(cfg.params.eta, "eta");
        set_f!(cfg.params.tau, "tau");
        set_u!(cfg.params.n_latent, "n_latent");
        set_u!(cfg.params.outer_iters, "outer_iters");
        set_u!(cfg.superpixel_count, "superpixels");
        set_u!(cfg.num_objects, "num_objects");
        set_u!(cfg.max_disp, "max_disp");
        set_u!(cfg.kernel_radius, "kernel_radius");
        set_f!(cfg.ransac_threshold, "ransac_threshold");
        set_u!(cfg.max_matches, "max_matches");
        set_u!(cfg.pd_iters, "pd_iters");
        set_f!(cfg.pd_tol, "pd_tol");
        if let Some(v) = u("seed")? {
            cfg.seed = v as u64;
        }
        if let Some(v) = b("two_frame")? {
            cfg.two_frame = v;
        }
        set_u!(cfg.proposals.plane_candidates, "plane_candidates");
        set_u!(cfg.proposals.motion_candidates, "motion_candidates");
        set_f!(cfg.proposals.plane_sigma_rel, "plane_sigma_rel");
        set_f!(cfg.proposals.plane_sigma_abs, "plane_sigma_abs");
        if let Some(v) = f("rot_sigma_deg")? {
            cfg.proposals.rot_sigma = v.to_radians();
        }
        set_f!(cfg.proposals.trans_sigma_rel, "trans_sigma_rel");
        set_f!(cfg.proposals.trans_sigma_abs, "trans_sigma_abs");
        set_u!(cfg.proposals.trws_passes, "trws_passes");
        set_u!(cfg.proposals.rounds, "sceneflow_rounds");

        if cfg.num_objects < 2 {
            return Err(Error::Config("num_objects must be >= 2".into()));
        }
        cfg.params.validate()?;
        Ok(RunConfig {
            pipeline: cfg,
            warnings,
        })
    }

    /// Key=value form of a pipeline configuration.
    pub fn to_key_values(cfg: &PipelineConfig) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let p = &cfg.params;
        for (k, v) in [
            ("theta1", p.theta1),
            ("theta2", p.theta2),
            ("theta3", p.theta3),
            ("theta4", p.theta4),
            ("theta5", p.theta5),
            ("lambda", p.lambda),
            ("alpha1", p.alpha1),
            ("alpha2", p.alpha2),
            ("alpha3", p.alpha3),
            ("theta_r", p.theta_r),
            ("theta_t", p.theta_t),
            ("w_label_depth", p.w_label_depth),
            ("w_label_motion", p.w_label_motion),
            ("gamma", p.gamma),
            ("eta", p.eta),
            ("tau", p.tau),
            ("ransac_threshold", cfg.ransac_threshold),
            ("pd_tol", cfg.pd_tol),
            ("plane_sigma_rel", cfg.proposals.plane_sigma_rel),
            ("plane_sigma_abs", cfg.proposals.plane_sigma_abs),
            ("rot_sigma_deg", cfg.proposals.rot_sigma.to_degrees()),
            ("trans_sigma_rel", cfg.proposals.trans_sigma_rel),
            ("trans_sigma_abs", cfg.proposals.trans_sigma_abs),
        ] {
            kv.insert(k.to_string(), v.to_string());
        }
        for (k, v) in [
            ("n_latent", p.n_latent),
            ("outer_iters", p.outer_iters),
            ("superpixels", cfg.superpixel_count),
            ("num_objects", cfg.num_objects),
            ("max_disp", cfg.max_disp),
            ("kernel_radius", cfg.kernel_radius),
            ("max_matches", cfg.max_matches),
            ("pd_iters", cfg.pd_iters),
            ("seed", cfg.seed as usize),
            ("plane_candidates", cfg.proposals.plane_candidates),
            ("motion_candidates", cfg.proposals.motion_candidates),
            ("trws_passes", cfg.proposals.trws_passes),
            ("sceneflow_rounds", cfg.proposals.rounds),
        ] {
            kv.insert(k.to_string(), v.to_string());
        }
        kv.insert("two_frame".to_string(), cfg.two_frame.to_string());
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::parse_key_values;

    #[test]
    fn defaults_roundtrip() {
        let cfg = PipelineConfig::default();
        let kv = RunConfig::to_key_values(&cfg);
        let parsed = RunConfig::from_key_values(&kv).unwrap();
        assert!(parsed.warnings.is_empty());
        assert_eq!(parsed.pipeline.params, cfg.params);
        assert_eq!(parsed.pipeline.superpixel_count, cfg.superpixel_count);
        assert_eq!(parsed.pipeline.seed, cfg.seed);
    }

    #[test]
    fn unknown_keys_warn() {
        let kv = parse_key_values("theta1=0.5\nwhatisthis=1\n").unwrap();
        let parsed = RunConfig::from_key_values(&kv).unwrap();
        assert_eq!(parsed.pipeline.params.theta1, 0.5);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("whatisthis"));
    }

    #[test]
    fn bad_values_rejected() {
        let kv = parse_key_values("theta1=abc\n").unwrap();
        assert!(RunConfig::from_key_values(&kv).is_err());
        let kv = parse_key_values("tau=0.9\n").unwrap();
        assert!(RunConfig::from_key_values(&kv).is_err());
        let kv = parse_key_values("num_objects=1\n").unwrap();
        assert!(RunConfig::from_key_values(&kv).is_err());
    }
}

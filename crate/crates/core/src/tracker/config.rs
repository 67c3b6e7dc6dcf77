//! Tracker configuration and its flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dcf::{LearnParams, ScaleParams};
use crate::error::{OtrError, Result};
use crate::ingest::CameraIntrinsics;
use crate::preimage::{IcpParams, PreImageParams};
use crate::segmentation::SegParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub tau_icp: f64,
    pub tau_rho: f64,
    pub n_r: usize,
    pub alpha_s: f64,
    pub lambda: f64,
    pub eta: f64,
    pub sigma_factor: f64,
    pub tau_q: f64,
    pub n_q: usize,
    pub tau_a: f64,
    pub n_s: usize,
    pub scale_step: f64,
    pub scale_lr: f64,
    pub cell_size: usize,
    pub padding: f64,
    pub template_size: f64,
    pub s_max: usize,
    pub admm_iters: usize,
    pub admm_mu0: f64,
    pub admm_beta: f64,
    pub admm_mu_max: f64,
    pub min_mask_fraction: f64,
    pub seg_color_bins: usize,
    pub seg_depth_bin_mm: f64,
    pub seg_depth_max_mm: f64,
    pub seg_fg_prior: f64,
    pub seg_smoothing_iters: usize,
    pub seg_update_rate: f64,
    pub icp_max_iters: usize,
    pub icp_max_distance: f64,
    pub icp_max_angle_deg: f64,
    pub icp_max_color: f64,
    pub max_surfels: usize,
    pub enable_view_specific: bool,
    pub enable_preimage: bool,
    pub colornames_table: Option<PathBuf>,
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let seg = SegParams::default();
        let icp = IcpParams::default();
        TrackerConfig {
            tau_icp: 5e-4,
            tau_rho: 0.20,
            n_r: 5,
            alpha_s: 1.07,
            lambda: 0.01,
            eta: 0.02,
            sigma_factor: 1.0 / 16.0,
            tau_q: 2.5,
            n_q: 100,
            tau_a: 0.3,
            n_s: 17,
            scale_step: 1.02,
            scale_lr: 0.025,
            cell_size: 4,
            padding: 1.5,
            template_size: 200.0,
            s_max: 20,
            admm_iters: 4,
            admm_mu0: 5.0,
            admm_beta: 3.0,
            admm_mu_max: 20.0,
            min_mask_fraction: 0.1,
            seg_color_bins: seg.color_bins,
            seg_depth_bin_mm: seg.depth_bin_mm,
            seg_depth_max_mm: seg.depth_max_mm,
            seg_fg_prior: seg.fg_prior,
            seg_smoothing_iters: seg.smoothing_iters,
            seg_update_rate: seg.update_rate,
            icp_max_iters: icp.max_iterations,
            icp_max_distance: icp.max_distance,
            icp_max_angle_deg: icp.max_normal_angle_deg,
            icp_max_color: icp.max_color_distance,
            max_surfels: 50_000,
            enable_view_specific: true,
            enable_preimage: true,
            colornames_table: None,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| OtrError::Config(format!("line {line}: bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(OtrError::Config(format!("line {line}: bad boolean {v:?} for {key}"))),
    }
}

impl TrackerConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OtrError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse `key = value` lines on top of the defaults. `#` starts a
    /// comment; unknown keys and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrackerConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| OtrError::Config(format!("line {n}: expected key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(OtrError::Config(format!("line {n}: duplicate key {k}")));
            }
            seen.push(k.to_string());
            c.set(k, v, n)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, k: &str, v: &str, n: usize) -> Result<()> {
        match k {
            "tau_icp" => self.tau_icp = parse_num(k, v, n)?,
            "tau_rho" => self.tau_rho = parse_num(k, v, n)?,
            "n_r" => self.n_r = parse_num(k, v, n)?,
            "alpha_s" => self.alpha_s = parse_num(k, v, n)?,
            "lambda" => self.lambda = parse_num(k, v, n)?,
            "eta" => self.eta = parse_num(k, v, n)?,
            "sigma_factor" => self.sigma_factor = parse_num(k, v, n)?,
            "tau_q" => self.tau_q = parse_num(k, v, n)?,
            "n_q" => self.n_q = parse_num(k, v, n)?,
            "tau_a" => self.tau_a = parse_num(k, v, n)?,
            "n_s" => self.n_s = parse_num(k, v, n)?,
            "scale_step" | "a" => self.scale_step = parse_num(k, v, n)?,
            "scale_lr" => self.scale_lr = parse_num(k, v, n)?,
            "cell_size" => self.cell_size = parse_num(k, v, n)?,
            "padding" => self.padding = parse_num(k, v, n)?,
            "template_size" => self.template_size = parse_num(k, v, n)?,
            "s_max" => self.s_max = parse_num(k, v, n)?,
            "admm_iters" => self.admm_iters = parse_num(k, v, n)?,
            "admm_mu0" => self.admm_mu0 = parse_num(k, v, n)?,
            "admm_beta" => self.admm_beta = parse_num(k, v, n)?,
            "admm_mu_max" => self.admm_mu_max = parse_num(k, v, n)?,
            "min_mask_fraction" => self.min_mask_fraction = parse_num(k, v, n)?,
            "seg_color_bins" => self.seg_color_bins = parse_num(k, v, n)?,
            "seg_depth_bin_mm" => self.seg_depth_bin_mm = parse_num(k, v, n)?,
            "seg_depth_max_mm" => self.seg_depth_max_mm = parse_num(k, v, n)?,
            "seg_fg_prior" => self.seg_fg_prior = parse_num(k, v, n)?,
            "seg_smoothing_iters" => self.seg_smoothing_iters = parse_num(k, v, n)?,
            "seg_update_rate" => self.seg_update_rate = parse_num(k, v, n)?,
            "icp_max_iters" => self.icp_max_iters = parse_num(k, v, n)?,
            "icp_max_distance" => self.icp_max_distance = parse_num(k, v, n)?,
            "icp_max_angle_deg" => self.icp_max_angle_deg = parse_num(k, v, n)?,
            "icp_max_color" => self.icp_max_color = parse_num(k, v, n)?,
            "max_surfels" => self.max_surfels = parse_num(k, v, n)?,
            "enable_view_specific" => self.enable_view_specific = parse_bool(k, v, n)?,
            "enable_preimage" => self.enable_preimage = parse_bool(k, v, n)?,
            "colornames_table" => self.colornames_table = Some(PathBuf::from(v)),
            "fx" => self.fx = Some(parse_num(k, v, n)?),
            "fy" => self.fy = Some(parse_num(k, v, n)?),
            "cx" => self.cx = Some(parse_num(k, v, n)?),
            "cy" => self.cy = Some(parse_num(k, v, n)?),
            _ => return Err(OtrError::Config(format!("line {n}: unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_icp", self.tau_icp),
            ("tau_rho", self.tau_rho),
            ("lambda", self.lambda),
            ("sigma_factor", self.sigma_factor),
            ("tau_q", self.tau_q),
            ("tau_a", self.tau_a),
            ("scale_lr", self.scale_lr),
            ("template_size", self.template_size),
            ("admm_mu0", self.admm_mu0),
            ("admm_mu_max", self.admm_mu_max),
            ("icp_max_distance", self.icp_max_distance),
            ("icp_max_angle_deg", self.icp_max_angle_deg),
            ("icp_max_color", self.icp_max_color),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OtrError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        let checks = [
            ((0.0..=1.0).contains(&self.eta), "eta must lie in [0, 1]"),
            (self.n_r >= 1, "n_r must be at least 1"),
            (self.n_q >= 1, "n_q must be at least 1"),
            (self.n_s % 2 == 1, "n_s must be odd"),
            (self.scale_step > 1.0, "scale_step must exceed 1"),
            (self.alpha_s >= 1.0, "alpha_s must be at least 1"),
            (self.cell_size >= 1, "cell_size must be at least 1"),
            (self.padding >= 0.0, "padding must be non-negative"),
            (self.admm_beta >= 1.0, "admm_beta must be at least 1"),
            ((0.0..1.0).contains(&self.min_mask_fraction), "min_mask_fraction must lie in [0, 1)"),
            (self.max_surfels >= 1, "max_surfels must be at least 1"),
            (self.icp_max_iters >= 1, "icp_max_iters must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(OtrError::Config(msg.into()));
            }
        }
        self.seg_params().validate()?;
        if self.fx.is_some() != self.fy.is_some() || self.cx.is_some() != self.cy.is_some() {
            return Err(OtrError::Config("fx/fy and cx/cy must be given in pairs".into()));
        }
        Ok(())
    }

    pub fn learn_params(&self) -> LearnParams {
        LearnParams {
            lambda: self.lambda,
            iterations: self.admm_iters,
            mu0: self.admm_mu0,
            beta: self.admm_beta,
            mu_max: self.admm_mu_max,
            min_mask_area: 1,
        }
    }

    pub fn scale_params(&self) -> ScaleParams {
        ScaleParams {
            levels: self.n_s,
            step: self.scale_step,
            learning_rate: self.scale_lr,
            cell_size: self.cell_size,
            ..ScaleParams::default()
        }
    }

    pub fn seg_params(&self) -> SegParams {
        SegParams {
            color_bins: self.seg_color_bins,
            depth_bin_mm: self.seg_depth_bin_mm,
            depth_max_mm: self.seg_depth_max_mm,
            fg_prior: self.seg_fg_prior,
            smoothing_iters: self.seg_smoothing_iters,
            update_rate: self.seg_update_rate,
        }
    }

    pub fn preimage_params(&self) -> PreImageParams {
        PreImageParams {
            icp: IcpParams {
                max_iterations: self.icp_max_iters,
                max_distance: self.icp_max_distance,
                max_normal_angle_deg: self.icp_max_angle_deg,
                max_color_distance: self.icp_max_color,
                ..IcpParams::default()
            },
            tau_icp: self.tau_icp,
            max_surfels: self.max_surfels,
            ..PreImageParams::default()
        }
    }

    /// Intrinsics override from the config, completed from `fallback`.
    pub fn intrinsics(&self, fallback: CameraIntrinsics) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.fx.unwrap_or(fallback.fx),
            self.fy.unwrap_or(fallback.fy),
            self.cx.unwrap_or(fallback.cx),
            self.cy.unwrap_or(fallback.cy),
        )
    }

    /// Every set key with its value as written in a config file.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let value = serde_json::to_value(self).expect("config serializes");
        let serde_json::Value::Object(map) = value else {
            return BTreeMap::new();
        };
        map.into_iter()
            .filter_map(|(k, v)| match v {
                serde_json::Value::Null => None,
                serde_json::Value::String(t) => Some((k, t)),
                other => Some((k, other.to_string())),
            })
            .collect()
    }

    /// Every key with its value, in the file format accepted by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrackerConfig::default().validate().unwrap();
        assert_eq!(TrackerConfig::default().tau_icp, 5e-4);
        assert_eq!(TrackerConfig::default().n_r, 5);
    }

    #[test]
    fn parse_with_comments() {
        let c = TrackerConfig::parse("# ablation\ntau_rho = 0.3  # looser\nenable_view_specific = false\n\nn_r=7\n").unwrap();
        assert_eq!(c.tau_rho, 0.3);
        assert!(!c.enable_view_specific);
        assert_eq!(c.n_r, 7);
    }

    #[test]
    fn unknown_and_bad_keys() {
        assert!(matches!(TrackerConfig::parse("tau_foo = 1"), Err(OtrError::Config(_))));
        assert!(TrackerConfig::parse("eta = 2").is_err());
        assert!(TrackerConfig::parse("n_s = 4").is_err());
        assert!(TrackerConfig::parse("eta 0.1").is_err());
        assert!(TrackerConfig::parse("eta = x").is_err());
        assert!(TrackerConfig::parse("eta = 0.1\neta = 0.2").is_err());
        assert!(TrackerConfig::parse("fx = 500").is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = TrackerConfig {
            enable_preimage: false,
            colornames_table: Some(PathBuf::from("/tmp/cn.txt")),
            fx: Some(500.0),
            fy: Some(501.0),
            ..TrackerConfig::default()
        };
        let back = TrackerConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }
}

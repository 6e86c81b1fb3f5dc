//! Calibration configuration: a flat `key = value` file. Missing keys take
//! the defaults listed by [`Config::template`].

use std::path::Path;

use nalgebra::Vector3;

use crate::dataset::{Fields, KeyValues};
use crate::error::{CalibError, Result};
use crate::filter::FilterConfig;
use crate::geometry::Pose;
use crate::icp::IcpParams;
use crate::lidar::LidarNoise;
use crate::planar::PlaneNoise;
use crate::propagation::ImuNoiseModel;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub imu_noise: ImuNoiseModel,
    pub gating: bool,
    pub history_horizon: f64,
    /// Relinearizations per camera or LiDAR update.
    pub update_iterations: usize,
    /// Pixel noise assumed by the camera update.
    pub sigma_px: f64,
    /// Use every n-th camera frame.
    pub frame_stride: usize,
    pub lidar_noise: LidarNoise,
    /// Scales the scan-match noise added for undistortion with an uncertain
    /// `T^I_L`: motion over the current and anchor scans times its current
    /// standard deviation.
    pub lidar_motion_gain: f64,
    pub icp: IcpParams,
    pub plane_noise: PlaneNoise,
    /// Largest stamp difference for a LiDAR/camera plane pair.
    pub pair_max_dt: f64,
    pub range_min: f64,
    pub range_max: f64,
    pub ransac_iterations: usize,
    pub ransac_tol: f64,
    pub min_plane_inliers: usize,
    /// Initial guess of `T^I_L`.
    pub init_t_il: Pose,
    /// Initial guess of `T^I_C`.
    pub init_t_ic: Pose,
    pub prior_sigma_ext_rot: f64,
    pub prior_sigma_ext_trans: f64,
    pub prior_sigma_rot: f64,
    pub prior_sigma_pos: f64,
    pub prior_sigma_vel: f64,
    pub prior_sigma_bg: f64,
    pub prior_sigma_ba: f64,
    /// Covariance trace limit as a multiple of the initial trace.
    pub divergence_factor: f64,
    /// Longest tolerated gap in the IMU stream, seconds.
    pub max_stream_gap: f64,
    /// Re-undistort the anchor scan once `T^I_L` moved this much (rad or m).
    pub anchor_refresh: f64,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let icp = IcpParams::default();
        Config {
            imu_noise: ImuNoiseModel::default(),
            gating: true,
            history_horizon: 2.0,
            update_iterations: 5,
            sigma_px: 0.5,
            frame_stride: 1,
            lidar_noise: LidarNoise::default(),
            lidar_motion_gain: 0.5,
            icp,
            plane_noise: PlaneNoise::default(),
            pair_max_dt: 0.05,
            range_min: 0.5,
            range_max: 6.0,
            ransac_iterations: 200,
            ransac_tol: 0.03,
            min_plane_inliers: 200,
            init_t_il: Pose::identity(),
            init_t_ic: Pose::identity(),
            prior_sigma_ext_rot: 0.1,
            prior_sigma_ext_trans: 0.1,
            prior_sigma_rot: 1e-3,
            prior_sigma_pos: 1e-3,
            prior_sigma_vel: 1e-2,
            prior_sigma_bg: 1e-3,
            prior_sigma_ba: 1e-2,
            divergence_factor: 1e6,
            max_stream_gap: 0.5,
            anchor_refresh: 1e-4,
            seed: 0,
        }
    }
}

fn kv_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl Config {
    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            noise: self.imu_noise,
            gating: self.gating,
            history_horizon: self.history_horizon,
            iterations: self.update_iterations,
        }
    }

    pub fn parse(path: &Path, text: &str) -> Result<Config> {
        let kv = KeyValues::parse(path, text)?;
        let known: Vec<&str> = TEMPLATE_KEYS.iter().map(|(k, _)| *k).collect();
        for (k, _, line) in &kv.entries {
            if !known.contains(&k.as_str()) {
                return Err(CalibError::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("unknown key `{k}`"),
                });
            }
        }
        let f = Fields { path, kv: &kv };
        let mut c = Config::default();
        let num = |key: &str, slot: &mut f64| -> Result<()> {
            if kv.get(key).is_some() {
                *slot = f.f64(key)?;
            }
            Ok(())
        };
        let count = |key: &str, slot: &mut usize| -> Result<()> {
            if kv.get(key).is_some() {
                *slot = f.usize(key)?;
            }
            Ok(())
        };
        num("sigma_g", &mut c.imu_noise.sigma_g)?;
        num("sigma_a", &mut c.imu_noise.sigma_a)?;
        num("sigma_bg", &mut c.imu_noise.sigma_bg)?;
        num("sigma_ba", &mut c.imu_noise.sigma_ba)?;
        if kv.get("gravity").is_some() {
            let g = f.vec("gravity", 3)?;
            c.imu_noise.gravity = Vector3::new(g[0], g[1], g[2]);
        }
        if let Some((v, line)) = kv.get("gating") {
            c.gating = kv_bool(v).ok_or_else(|| CalibError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("`gating`: expected true or false, got {v}"),
            })?;
        }
        num("history_horizon", &mut c.history_horizon)?;
        count("update_iterations", &mut c.update_iterations)?;
        num("sigma_px", &mut c.sigma_px)?;
        count("frame_stride", &mut c.frame_stride)?;
        let mut rot_deg = c.lidar_noise.sigma_rot.to_degrees();
        num("lidar_sigma_rot_deg", &mut rot_deg)?;
        c.lidar_noise.sigma_rot = rot_deg.to_radians();
        num("lidar_sigma_trans", &mut c.lidar_noise.sigma_trans)?;
        num("lidar_fitness_scale", &mut c.lidar_noise.fitness_scale)?;
        num("lidar_max_fitness", &mut c.lidar_noise.max_fitness)?;
        num("lidar_motion_gain", &mut c.lidar_motion_gain)?;
        count("icp_max_iter", &mut c.icp.max_iter)?;
        num("icp_tol", &mut c.icp.tol)?;
        num("icp_max_corr_dist", &mut c.icp.max_corr_dist)?;
        count("icp_max_source_points", &mut c.icp.max_source_points)?;
        num("plane_sigma_n", &mut c.plane_noise.sigma_n)?;
        num("plane_sigma_d", &mut c.plane_noise.sigma_d)?;
        num("pair_max_dt", &mut c.pair_max_dt)?;
        num("range_min", &mut c.range_min)?;
        num("range_max", &mut c.range_max)?;
        count("ransac_iterations", &mut c.ransac_iterations)?;
        num("ransac_tol", &mut c.ransac_tol)?;
        count("min_plane_inliers", &mut c.min_plane_inliers)?;
        if let Some(p) = f.optional_pose("init_t_il")? {
            c.init_t_il = p;
        }
        if let Some(p) = f.optional_pose("init_t_ic")? {
            c.init_t_ic = p;
        }
        num("prior_sigma_ext_rot", &mut c.prior_sigma_ext_rot)?;
        num("prior_sigma_ext_trans", &mut c.prior_sigma_ext_trans)?;
        num("prior_sigma_rot", &mut c.prior_sigma_rot)?;
        num("prior_sigma_pos", &mut c.prior_sigma_pos)?;
        num("prior_sigma_vel", &mut c.prior_sigma_vel)?;
        num("prior_sigma_bg", &mut c.prior_sigma_bg)?;
        num("prior_sigma_ba", &mut c.prior_sigma_ba)?;
        num("divergence_factor", &mut c.divergence_factor)?;
        num("max_stream_gap", &mut c.max_stream_gap)?;
        num("anchor_refresh", &mut c.anchor_refresh)?;
        if kv.get("seed").is_some() {
            c.seed = f.usize("seed")? as u64;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(path, &std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.imu_noise.validate()?;
        let positive = [
            ("history_horizon", self.history_horizon),
            ("sigma_px", self.sigma_px),
            ("lidar_sigma_rot_deg", self.lidar_noise.sigma_rot),
            ("lidar_sigma_trans", self.lidar_noise.sigma_trans),
            ("lidar_fitness_scale", self.lidar_noise.fitness_scale),
            ("lidar_max_fitness", self.lidar_noise.max_fitness),
            ("plane_sigma_n", self.plane_noise.sigma_n),
            ("plane_sigma_d", self.plane_noise.sigma_d),
            ("pair_max_dt", self.pair_max_dt),
            ("ransac_tol", self.ransac_tol),
            ("prior_sigma_ext_rot", self.prior_sigma_ext_rot),
            ("prior_sigma_ext_trans", self.prior_sigma_ext_trans),
            ("prior_sigma_rot", self.prior_sigma_rot),
            ("prior_sigma_pos", self.prior_sigma_pos),
            ("prior_sigma_vel", self.prior_sigma_vel),
            ("prior_sigma_bg", self.prior_sigma_bg),
            ("prior_sigma_ba", self.prior_sigma_ba),
            ("divergence_factor", self.divergence_factor),
            ("max_stream_gap", self.max_stream_gap),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CalibError::InvalidArgument(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.range_min >= 0.0 && self.range_max > self.range_min) {
            return Err(CalibError::InvalidArgument("range gate must satisfy 0 <= range_min < range_max".into()));
        }
        if !(self.lidar_motion_gain >= 0.0 && self.lidar_motion_gain.is_finite()) {
            return Err(CalibError::InvalidArgument("lidar_motion_gain must be non-negative".into()));
        }
        if self.update_iterations == 0 {
            return Err(CalibError::InvalidArgument("update_iterations must be at least 1".into()));
        }
        if self.frame_stride == 0 {
            return Err(CalibError::InvalidArgument("frame_stride must be at least 1".into()));
        }
        Ok(())
    }

    /// The file `parse` would read back into `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, doc) in TEMPLATE_KEYS {
            s += &format!("# {doc}\n{key} = {}\n", self.value_of(key));
        }
        s
    }

    /// Commented configuration listing every key with its default.
    pub fn template() -> String {
        let mut s = String::from("# Calibration configuration. Lines are `key = value`; `#` starts a comment.\n\n");
        s += &Config::default().to_text();
        s
    }

    fn value_of(&self, key: &str) -> String {
        let n = &self.imu_noise;
        match key {
            "sigma_g" => n.sigma_g.to_string(),
            "sigma_a" => n.sigma_a.to_string(),
            "sigma_bg" => n.sigma_bg.to_string(),
            "sigma_ba" => n.sigma_ba.to_string(),
            "gravity" => format!("{} {} {}", n.gravity.x, n.gravity.y, n.gravity.z),
            "gating" => self.gating.to_string(),
            "history_horizon" => self.history_horizon.to_string(),
            "update_iterations" => self.update_iterations.to_string(),
            "sigma_px" => self.sigma_px.to_string(),
            "frame_stride" => self.frame_stride.to_string(),
            "lidar_sigma_rot_deg" => self.lidar_noise.sigma_rot.to_degrees().to_string(),
            "lidar_sigma_trans" => self.lidar_noise.sigma_trans.to_string(),
            "lidar_fitness_scale" => self.lidar_noise.fitness_scale.to_string(),
            "lidar_max_fitness" => self.lidar_noise.max_fitness.to_string(),
            "lidar_motion_gain" => self.lidar_motion_gain.to_string(),
            "icp_max_iter" => self.icp.max_iter.to_string(),
            "icp_tol" => self.icp.tol.to_string(),
            "icp_max_corr_dist" => self.icp.max_corr_dist.to_string(),
            "icp_max_source_points" => self.icp.max_source_points.to_string(),
            "plane_sigma_n" => self.plane_noise.sigma_n.to_string(),
            "plane_sigma_d" => self.plane_noise.sigma_d.to_string(),
            "pair_max_dt" => self.pair_max_dt.to_string(),
            "range_min" => self.range_min.to_string(),
            "range_max" => self.range_max.to_string(),
            "ransac_iterations" => self.ransac_iterations.to_string(),
            "ransac_tol" => self.ransac_tol.to_string(),
            "min_plane_inliers" => self.min_plane_inliers.to_string(),
            "init_t_il" => self.init_t_il.to_string(),
            "init_t_ic" => self.init_t_ic.to_string(),
            "prior_sigma_ext_rot" => self.prior_sigma_ext_rot.to_string(),
            "prior_sigma_ext_trans" => self.prior_sigma_ext_trans.to_string(),
            "prior_sigma_rot" => self.prior_sigma_rot.to_string(),
            "prior_sigma_pos" => self.prior_sigma_pos.to_string(),
            "prior_sigma_vel" => self.prior_sigma_vel.to_string(),
            "prior_sigma_bg" => self.prior_sigma_bg.to_string(),
            "prior_sigma_ba" => self.prior_sigma_ba.to_string(),
            "divergence_factor" => self.divergence_factor.to_string(),
            "max_stream_gap" => self.max_stream_gap.to_string(),
            "anchor_refresh" => self.anchor_refresh.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("key list and value table out of sync: {key}"),
        }
    }
}

const TEMPLATE_KEYS: &[(&str, &str)] = &[
    ("sigma_g", "gyro white noise, rad/s/sqrt(Hz)"),
    ("sigma_a", "accelerometer white noise, m/s^2/sqrt(Hz)"),
    ("sigma_bg", "gyro bias random walk, rad/s^2/sqrt(Hz)"),
    ("sigma_ba", "accelerometer bias random walk, m/s^3/sqrt(Hz)"),
    ("gravity", "gravity in the world frame, m/s^2"),
    ("gating", "chi-square gating of LiDAR and plane updates"),
    ("history_horizon", "seconds of state history kept for cloning and undistortion"),
    ("update_iterations", "relinearizations per camera or LiDAR update (1 = plain EKF)"),
    ("sigma_px", "corner pixel noise"),
    ("frame_stride", "use every n-th camera frame"),
    ("lidar_sigma_rot_deg", "scan-match rotation noise, degrees"),
    ("lidar_sigma_trans", "scan-match translation noise, m"),
    ("lidar_fitness_scale", "fitness at which the scan-match noise doubles, m"),
    ("lidar_max_fitness", "scan matches with worse fitness are rejected, m"),
    ("lidar_motion_gain", "extra scan-match noise per rad/m of scan motion and unit T_IL std"),
    ("icp_max_iter", "ICP iteration cap"),
    ("icp_tol", "ICP convergence threshold on the update norm"),
    ("icp_max_corr_dist", "ICP correspondence radius, m"),
    ("icp_max_source_points", "ICP source subsample size"),
    ("plane_sigma_n", "plane normal noise per component"),
    ("plane_sigma_d", "plane offset noise, m"),
    ("pair_max_dt", "largest stamp difference of a LiDAR/camera plane pair, s"),
    ("range_min", "plane extraction range gate, near edge, m"),
    ("range_max", "plane extraction range gate, far edge, m"),
    ("ransac_iterations", "RANSAC hypotheses per scan"),
    ("ransac_tol", "RANSAC inlier distance, m"),
    ("min_plane_inliers", "fewest inliers for a LiDAR board plane"),
    ("init_t_il", "initial LiDAR-to-IMU guess: qw qx qy qz tx ty tz"),
    ("init_t_ic", "initial camera-to-IMU guess: qw qx qy qz tx ty tz"),
    ("prior_sigma_ext_rot", "extrinsic rotation prior, rad"),
    ("prior_sigma_ext_trans", "extrinsic translation prior, m"),
    ("prior_sigma_rot", "initial IMU attitude prior, rad"),
    ("prior_sigma_pos", "initial IMU position prior, m"),
    ("prior_sigma_vel", "initial velocity prior, m/s"),
    ("prior_sigma_bg", "initial gyro bias prior, rad/s"),
    ("prior_sigma_ba", "initial accelerometer bias prior, m/s^2"),
    ("divergence_factor", "abort once the covariance trace exceeds this multiple of its initial value"),
    ("max_stream_gap", "longest tolerated IMU gap, s"),
    ("anchor_refresh", "rebuild the LiDAR map once T_IL moved this much, rad or m"),
    ("seed", "seed for randomized steps (RANSAC, ICP subsampling)"),
];

//! Seeded synthetic traffic scenes and the per-agent observation model.
//!
//! A scene holds one ego vehicle (agent 0) at the center of a square area, a
//! set of collaborating vehicles, one roadside unit, and ground-truth vehicle
//! boxes. Each agent observes an agent-centered BEV cell grid in which a cell
//! carries evidence 1 when its center lies inside a vehicle that is within
//! sensor range and not shadowed by another vehicle.

use std::f64::consts::FRAC_PI_2;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{intersection_area, Point, Pose, RotatedBox, SectorPartition};
use crate::grid::GridSpec;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

const VEHICLE_LENGTH: (f64, f64) = (3.5, 5.5);
const VEHICLE_WIDTH: (f64, f64) = (1.6, 2.2);
/// Heading jitter around the four road directions, in degrees.
const HEADING_JITTER_DEG: f64 = 10.0;
/// Extra spacing between vehicle outlines so their rasters stay separable.
const VEHICLE_CLEARANCE: f64 = 1.5;
/// Minimum distance between a vehicle center and any agent.
const AGENT_CLEARANCE: f64 = 4.0;
const BORDER_MARGIN: f64 = 2.5;
const MIN_COLLABORATOR_DISTANCE: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("could not place vehicle {index} after {attempts} attempts (scene too dense)")]
    PlacementExhausted { index: usize, attempts: usize },
    #[error("unknown agent {0}")]
    UnknownAgent(usize),
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Side of the square scene area in meters.
    pub area_side: f64,
    pub n_collaborators: usize,
    pub n_vehicles: usize,
    /// Relative vehicle density per ego sector.
    pub vehicle_density_profile: Vec<f64>,
    /// Sector cut points in degrees; empty means equal sectors.
    pub sector_cuts: Vec<f64>,
    pub sensor_range: f64,
    pub occlusion_enabled: bool,
    pub dropout_prob: f64,
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            area_side: 64.0,
            n_collaborators: 4,
            n_vehicles: 30,
            vehicle_density_profile: vec![0.4, 0.4, 0.1, 0.1],
            sector_cuts: Vec::new(),
            sensor_range: 24.0,
            occlusion_enabled: true,
            dropout_prob: 0.1,
            height: 64,
            width: 64,
            cell_size: 1.0,
        }
    }
}

impl ScenarioConfig {
    /// All violated constraints, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.area_side > 0.0 && self.area_side.is_finite()) {
            p.push(format!("area_side must be positive, got {}", self.area_side));
        }
        if self.n_vehicles < 1 {
            p.push("n_vehicles must be at least 1".into());
        }
        if self.vehicle_density_profile.is_empty() {
            p.push("vehicle_density_profile must not be empty".into());
        } else if self
            .vehicle_density_profile
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            p.push("vehicle_density_profile weights must be finite and >= 0".into());
        } else if self.vehicle_density_profile.iter().all(|w| *w == 0.0) {
            p.push("vehicle_density_profile must not be all zero".into());
        }
        if !self.sector_cuts.is_empty()
            && self.sector_cuts.len() != self.vehicle_density_profile.len() + 1
        {
            p.push(format!(
                "sector_cuts has {} points but the density profile has {} sectors",
                self.sector_cuts.len(),
                self.vehicle_density_profile.len()
            ));
        }
        if self.sensor_range.is_nan() || self.sensor_range <= 0.0 {
            p.push(format!("sensor_range must be positive, got {}", self.sensor_range));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            p.push(format!("dropout_prob must be in [0, 1], got {}", self.dropout_prob));
        }
        if self.height == 0 || self.width == 0 {
            p.push("grid height and width must be at least 1".into());
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            p.push("grid height and width must fit in 16 bits".into());
        }
        if self.cell_size.is_nan() || self.cell_size <= 0.0 {
            p.push(format!("cell_size must be positive, got {}", self.cell_size));
        }
        if self.n_collaborators + 1 > u16::MAX as usize {
            p.push("too many collaborators".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::InvalidConfig(p.join("; ")))
        }
    }

    pub fn ego_pose(&self) -> Pose {
        Pose::new(0.5 * self.area_side, 0.5 * self.area_side, 0.0)
    }

    pub fn n_dir(&self) -> usize {
        self.vehicle_density_profile.len()
    }

    /// Ego-centered sector partition.
    pub fn partition(&self) -> SectorPartition {
        let ego = self.ego_pose();
        if self.sector_cuts.is_empty() {
            SectorPartition::uniform(self.n_dir(), ego.position(), ego.heading)
        } else {
            SectorPartition::from_cuts(&self.sector_cuts, ego.position(), ego.heading)
                .expect("sector cuts validated with the run config")
        }
    }

    /// Shared global grid, centered on the ego.
    pub fn global_grid(&self) -> GridSpec {
        GridSpec::centered(
            self.height,
            self.width,
            self.cell_size,
            self.ego_pose().position(),
        )
    }

    /// Agent-centered grid in the agent's own frame.
    pub fn local_grid(&self) -> GridSpec {
        GridSpec::centered(self.height, self.width, self.cell_size, Point::new(0.0, 0.0))
    }
}

/// Binary per-cell evidence on an agent-centered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceGrid {
    /// Grid expressed in the observing agent's frame.
    pub grid: GridSpec,
    pub pose: Pose,
    pub sensor_range: f64,
    pub values: Vec<u8>,
}

impl EvidenceGrid {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[self.grid.index(row, col)]
    }

    pub fn count_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioWorld {
    pub config: ScenarioConfig,
    pub ego_pose: Pose,
    pub collaborator_poses: Vec<Pose>,
    pub rsu_pose: Pose,
    pub vehicles: Vec<RotatedBox>,
    #[serde(skip)]
    pub observations: Vec<EvidenceGrid>,
}

impl ScenarioWorld {
    pub fn n_agents(&self) -> usize {
        1 + self.collaborator_poses.len()
    }

    pub fn agent_pose(&self, agent: usize) -> Result<Pose, ScenarioError> {
        match agent {
            0 => Ok(self.ego_pose),
            k if k <= self.collaborator_poses.len() => Ok(self.collaborator_poses[k - 1]),
            k => Err(ScenarioError::UnknownAgent(k)),
        }
    }

    pub fn partition(&self) -> SectorPartition {
        self.config.partition()
    }

    pub fn global_grid(&self) -> GridSpec {
        self.config.global_grid()
    }

    /// Precomputed observation of `agent`.
    pub fn observation(&self, agent: usize) -> Result<&EvidenceGrid, ScenarioError> {
        self.observations
            .get(agent)
            .ok_or(ScenarioError::UnknownAgent(agent))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

fn snap(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

fn overlaps_with_clearance(a: &RotatedBox, b: &RotatedBox, clearance: f64) -> bool {
    let grow = |x: &RotatedBox| RotatedBox {
        length: x.length + clearance,
        width: x.width + clearance,
        ..*x
    };
    intersection_area(&grow(a), &grow(b)) > 0.0
}

/// Generates a scene deterministically from its config.
pub fn generate(config: &ScenarioConfig) -> Result<ScenarioWorld, ScenarioError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ego = config.ego_pose();
    let half = 0.5 * config.area_side;

    // Collaborators sit on the grid lattice, aligned with a road direction.
    let mut collaborators: Vec<Pose> = Vec::with_capacity(config.n_collaborators);
    let max_dist = half.max(MIN_COLLABORATOR_DISTANCE);
    let mut attempts = 0;
    while collaborators.len() < config.n_collaborators {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(ScenarioError::InvalidConfig(
                "cannot place collaborators in the area".into(),
            ));
        }
        let dist = rng.gen_range(MIN_COLLABORATOR_DISTANCE..=max_dist);
        let bearing = rng.gen_range(0.0..std::f64::consts::TAU);
        let heading = rng.gen_range(0..4) as f64 * FRAC_PI_2;
        let x = ego.x + snap(dist * bearing.cos(), config.cell_size);
        let y = ego.y + snap(dist * bearing.sin(), config.cell_size);
        let p = Point::new(x, y);
        let d = p.dist(ego.position());
        if !(MIN_COLLABORATOR_DISTANCE..=max_dist).contains(&d) {
            continue;
        }
        if collaborators.iter().any(|c| c.position().dist(p) < AGENT_CLEARANCE) {
            continue;
        }
        collaborators.push(Pose::new(x, y, heading));
    }

    let rsu_pose = Pose::new(ego.x + 8.0, ego.y + 8.0, 0.0);
    let partition = config.partition();
    let weights = WeightedIndex::new(&config.vehicle_density_profile)
        .map_err(|e| ScenarioError::InvalidConfig(e.to_string()))?;
    let agents: Vec<Point> = std::iter::once(ego.position())
        .chain(collaborators.iter().map(Pose::position))
        .collect();

    let lo = BORDER_MARGIN.min(half);
    let hi = (config.area_side - BORDER_MARGIN).max(lo + f64::EPSILON);
    let mut vehicles: Vec<RotatedBox> = Vec::with_capacity(config.n_vehicles);
    for index in 0..config.n_vehicles {
        let sector = weights.sample(&mut rng);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(lo..hi);
            let length = rng.gen_range(VEHICLE_LENGTH.0..=VEHICLE_LENGTH.1);
            let width = rng.gen_range(VEHICLE_WIDTH.0..=VEHICLE_WIDTH.1);
            let heading = rng.gen_range(0..4) as f64 * FRAC_PI_2
                + rng
                    .gen_range(-HEADING_JITTER_DEG..=HEADING_JITTER_DEG)
                    .to_radians();
            let candidate = RotatedBox::new(cx, cy, length, width, heading);
            if partition.sector_of(&candidate) != sector {
                continue;
            }
            if agents
                .iter()
                .any(|a| a.dist(candidate.center()) < AGENT_CLEARANCE)
            {
                continue;
            }
            if vehicles
                .iter()
                .any(|v| overlaps_with_clearance(v, &candidate, VEHICLE_CLEARANCE))
            {
                continue;
            }
            placed = Some(candidate);
            break;
        }
        match placed {
            Some(v) => vehicles.push(v),
            None => {
                return Err(ScenarioError::PlacementExhausted {
                    index,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })
            }
        }
    }

    let mut world = ScenarioWorld {
        config: config.clone(),
        ego_pose: ego,
        collaborator_poses: collaborators,
        rsu_pose,
        vehicles,
        observations: Vec::new(),
    };
    world.observations = (0..world.n_agents())
        .map(|a| observe(&world, a))
        .collect::<Result<_, _>>()?;
    Ok(world)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` keyed by `(seed, agent, row, col)`.
pub fn dropout_draw(seed: u64, agent: usize, row: usize, col: usize) -> f64 {
    let mut h = splitmix64(seed ^ 0xD1B5_4A32_D192_ED03);
    h = splitmix64(h ^ agent as u64);
    h = splitmix64(h ^ row as u64);
    h = splitmix64(h ^ col as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Evidence grid seen by `agent` (0 is the ego), in the agent's own frame.
pub fn observe(world: &ScenarioWorld, agent: usize) -> Result<EvidenceGrid, ScenarioError> {
    let pose = world.agent_pose(agent)?;
    let cfg = &world.config;
    let grid = cfg.local_grid();
    let mut values = vec![0u8; grid.n_cells()];
    let origin = pose.position();

    for (vi, vehicle) in world.vehicles.iter().enumerate() {
        let local: Vec<Point> = vehicle.corners().iter().map(|&c| pose.to_local(c)).collect();
        let min_x = local.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = local.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = local.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = local.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let cell_range = |lo: f64, hi: f64, origin: f64, n: usize| {
            let a = ((lo - origin) / grid.cell_size).floor().clamp(0.0, n as f64) as usize;
            let b = ((hi - origin) / grid.cell_size).floor() + 1.0;
            (a, b.clamp(0.0, n as f64) as usize)
        };
        let (c0, c1) = cell_range(min_x, max_x, grid.origin.x, grid.width);
        let (r0, r1) = cell_range(min_y, max_y, grid.origin.y, grid.height);
        for r in r0..r1 {
            for c in c0..c1 {
                let center = pose.to_parent(grid.cell_center(r, c));
                if !vehicle.contains(center) {
                    continue;
                }
                if center.dist(origin) > cfg.sensor_range {
                    continue;
                }
                if cfg.occlusion_enabled
                    && world
                        .vehicles
                        .iter()
                        .enumerate()
                        .any(|(oi, other)| oi != vi && other.intersects_segment(origin, center))
                {
                    continue;
                }
                if cfg.dropout_prob > 0.0 && dropout_draw(cfg.seed, agent, r, c) < cfg.dropout_prob
                {
                    continue;
                }
                values[grid.index(r, c)] = 1;
            }
        }
    }

    Ok(EvidenceGrid {
        grid,
        pose,
        sensor_range: cfg.sensor_range,
        values,
    })
}

/// Per-sector scores from the roadside unit's unoccluded view, weighting each
/// vehicle with `weight`.
pub fn rsu_observe_with<F>(world: &ScenarioWorld, weight: F) -> Vec<f64>
where
    F: Fn(&RotatedBox) -> f64,
{
    let partition = world.partition();
    let mut scores = vec![0.0; partition.n_dir()];
    for v in &world.vehicles {
        scores[partition.sector_of(v)] += weight(v);
    }
    scores
}

/// Vehicle counts per ego sector as reported by the roadside unit.
pub fn rsu_observe(world: &ScenarioWorld) -> Vec<usize> {
    let partition = world.partition();
    let mut counts = vec![0usize; partition.n_dir()];
    for v in &world.vehicles {
        counts[partition.sector_of(v)] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            occlusion_enabled: false,
            dropout_prob: 0.0,
            ..Default::default()
        }
    }

    fn hand_world(vehicles: Vec<RotatedBox>, cfg: ScenarioConfig) -> ScenarioWorld {
        let mut w = ScenarioWorld {
            ego_pose: cfg.ego_pose(),
            collaborator_poses: vec![],
            rsu_pose: cfg.ego_pose(),
            vehicles,
            observations: vec![],
            config: cfg,
        };
        w.observations = vec![observe(&w, 0).unwrap()];
        w
    }

    #[test]
    fn single_vehicle_scene() {
        let cfg = ScenarioConfig {
            n_vehicles: 1,
            ..quiet(3)
        };
        let w = generate(&cfg).unwrap();
        assert_eq!(w.vehicles.len(), 1);
        assert_eq!(w.n_agents(), 5);
    }

    #[test]
    fn zero_density_sectors_stay_empty() {
        let cfg = ScenarioConfig {
            vehicle_density_profile: vec![1.0, 0.0, 0.0, 0.0],
            n_vehicles: 10,
            ..quiet(11)
        };
        let w = generate(&cfg).unwrap();
        let p = w.partition();
        assert!(w.vehicles.iter().all(|v| p.sector_of(v) == 0));
        assert_eq!(rsu_observe(&w), vec![10, 0, 0, 0]);
    }

    #[test]
    fn seeds_are_reproducible() {
        let a = generate(&ScenarioConfig { seed: 42, ..Default::default() }).unwrap();
        let b = generate(&ScenarioConfig { seed: 42, ..Default::default() }).unwrap();
        let c = generate(&ScenarioConfig { seed: 43, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.vehicles, c.vehicles);
    }

    #[test]
    fn generated_scene_invariants() {
        for seed in 0..10 {
            let w = generate(&ScenarioConfig { seed, ..Default::default() }).unwrap();
            let side = w.config.area_side;
            for (i, a) in w.vehicles.iter().enumerate() {
                assert!(a.cx > 0.0 && a.cx < side && a.cy > 0.0 && a.cy < side);
                a.validate().unwrap();
                for b in &w.vehicles[i + 1..] {
                    assert!(crate::geometry::iou(a, b) <= 0.1);
                }
            }
            for c in &w.collaborator_poses {
                let d = c.position().dist(w.ego_pose.position());
                assert!((10.0..=side / 2.0).contains(&d), "collaborator at {d}");
            }
            assert_eq!(rsu_observe(&w).iter().sum::<usize>(), w.vehicles.len());
        }
    }

    #[test]
    fn overdense_config_is_rejected() {
        let cfg = ScenarioConfig {
            area_side: 12.0,
            n_vehicles: 40,
            n_collaborators: 0,
            height: 12,
            width: 12,
            ..quiet(1)
        };
        assert!(matches!(
            generate(&cfg),
            Err(ScenarioError::PlacementExhausted { .. })
        ));
    }

    #[test]
    fn unknown_agent() {
        let w = generate(&quiet(0)).unwrap();
        assert_eq!(
            observe(&w, 99).unwrap_err(),
            ScenarioError::UnknownAgent(99)
        );
    }

    #[test]
    fn adjacent_vehicle_fully_visible() {
        let cfg = quiet(0);
        let ego = cfg.ego_pose();
        let v = RotatedBox::new(ego.x + 6.0, ego.y, 4.0, 2.0, 0.0);
        let w = hand_world(vec![v], cfg);
        let obs = &w.observations[0];
        let mut inside = 0;
        for (r, c) in obs.grid.cells() {
            let p = ego.to_parent(obs.grid.cell_center(r, c));
            if v.contains(p) {
                inside += 1;
                assert_eq!(obs.get(r, c), 1);
            }
        }
        assert_eq!(inside, 8);
        assert_eq!(obs.count_positive(), 8);
    }

    #[test]
    fn collinear_vehicle_is_shadowed() {
        let cfg = ScenarioConfig {
            occlusion_enabled: true,
            ..quiet(0)
        };
        let ego = cfg.ego_pose();
        let near = RotatedBox::new(ego.x + 6.0, ego.y, 4.0, 2.0, 0.0);
        let far = RotatedBox::new(ego.x + 14.0, ego.y, 4.0, 2.0, 0.0);
        let w = hand_world(vec![near, far], cfg);
        let obs = &w.observations[0];
        for (r, c) in obs.grid.cells() {
            let p = ego.to_parent(obs.grid.cell_center(r, c));
            if far.contains(p) {
                assert_eq!(obs.get(r, c), 0, "far vehicle cell {r},{c} should be occluded");
            }
            if near.contains(p) {
                assert_eq!(obs.get(r, c), 1);
            }
        }
    }

    #[test]
    fn full_dropout_blanks_everything() {
        let cfg = ScenarioConfig {
            dropout_prob: 1.0,
            ..Default::default()
        };
        let w = generate(&cfg).unwrap();
        assert!(w.observations.iter().all(|o| o.count_positive() == 0));
    }

    #[test]
    fn out_of_range_vehicle_invisible() {
        let cfg = ScenarioConfig {
            sensor_range: 5.0,
            ..quiet(0)
        };
        let ego = cfg.ego_pose();
        let v = RotatedBox::new(ego.x + 20.0, ego.y, 4.0, 2.0, 0.0);
        let w = hand_world(vec![v], cfg);
        assert_eq!(w.observations[0].count_positive(), 0);
    }

    #[test]
    fn dropout_draw_is_keyed() {
        assert_eq!(dropout_draw(1, 2, 3, 4), dropout_draw(1, 2, 3, 4));
        assert_ne!(dropout_draw(1, 2, 3, 4), dropout_draw(1, 2, 4, 3));
        let mean: f64 = (0..10_000).map(|i| dropout_draw(9, 0, i, 0)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ScenarioConfig {
            vehicle_density_profile: vec![0.0, 0.0],
            dropout_prob: 2.0,
            ..Default::default()
        };
        assert_eq!(cfg.problems().len(), 2);
        assert!(generate(&cfg).is_err());
    }
}

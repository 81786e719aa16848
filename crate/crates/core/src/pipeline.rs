//! One ego's perception tick: encode every agent, compute the direction
//! mask, score and clip queries, exchange messages over the wire format,
//! fuse and decode.

use serde::{Deserialize, Serialize};

use crate::comms::{
    build_message, clip_queries, deserialize, initial_query, score_mlp, score_reference, serialize,
    BudgetLedger, Q0Mode, QueryConfidenceMap, QueryMap, ScorerParams, TieBreak,
};
use crate::direction::{compute_mask, direction_embedding, DirectionMask, DirectionScores};
use crate::features::{encode, pose_embedding, to_global_frame, BevFeatureMap, SparseFeatureMap};
use crate::fusion::{fuse_all, AttentionParams, FusedMap, FusionInput};
use crate::geometry::{RotatedBox, SectorPartition};
use crate::grid::GridSpec;
use crate::scenario::{rsu_observe, ScenarioWorld};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full pipeline with the roadside direction mask.
    Directed,
    /// Same pipeline with the direction mask forced all-on.
    Uniform,
    /// Ego only, no communication.
    Single,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Directed => "directed",
            Method::Uniform => "uniform",
            Method::Single => "single",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Knobs shared by every method.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub channels: usize,
    pub interest: Vec<f64>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub q0_mode: Q0Mode,
    pub tie_break: TieBreak,
    pub conf_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Reference,
    Mlp(ScorerParams),
}

/// Everything about a scene that does not depend on the method or budget.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub world: ScenarioWorld,
    pub grid: GridSpec,
    pub partition: SectorPartition,
    /// Ego features on the global grid.
    pub ego: BevFeatureMap,
    /// Collaborator features resampled onto the global grid.
    pub collaborators: Vec<BevFeatureMap>,
    pub pe: Vec<Vec<f64>>,
    pub q0: Vec<Vec<f64>>,
    pub mask: DirectionMask,
}

impl PreparedScene {
    pub fn new(world: ScenarioWorld, settings: &Settings) -> Result<Self, Error> {
        let grid = world.global_grid();
        let partition = world.partition();
        let global = |agent: usize| -> Result<BevFeatureMap, Error> {
            let local = encode(world.observation(agent)?, settings.channels)?;
            Ok(to_global_frame(&local, &world.agent_pose(agent)?, &grid))
        };
        let ego = global(0)?;
        let collaborators = (1..world.n_agents())
            .map(global)
            .collect::<Result<Vec<_>, _>>()?;
        let pe = pose_embedding(&world.collaborator_poses, &grid, world.config.area_side);
        let q0 = initial_query(settings.q0_mode, &ego, collaborators.len());
        let counts = rsu_observe(&world);
        if settings.interest.len() != counts.len() {
            return Err(Error::Config(vec![format!(
                "{} interest weights for {} sectors",
                settings.interest.len(),
                counts.len()
            )]));
        }
        let scores = DirectionScores::from_counts(&counts, &settings.interest);
        let mask = compute_mask(&scores, settings.sigma1, settings.sigma2);
        Ok(PreparedScene {
            world,
            grid,
            partition,
            ego,
            collaborators,
            pe,
            q0,
            mask,
        })
    }

    pub fn truths(&self) -> &[RotatedBox] {
        &self.world.vehicles
    }

    /// Direction embedding as the method sees it.
    pub fn direction_embedding(&self, method: Method) -> Vec<f64> {
        match method {
            Method::Uniform => vec![1.0; self.grid.n_cells()],
            _ => direction_embedding(&self.mask, &self.partition, &self.grid),
        }
    }

    pub fn score(&self, method: Method, scorer: &Scorer) -> Result<QueryConfidenceMap, Error> {
        let de = self.direction_embedding(method);
        let (h, w) = (self.grid.height, self.grid.width);
        Ok(match scorer {
            Scorer::Reference => score_reference(&self.q0, &self.pe, &de, h, w)?,
            Scorer::Mlp(p) => score_mlp(p, &self.q0, &self.pe, &de, h, w)?,
        })
    }
}

/// Result of one hard-path tick.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub method: Method,
    pub query_map: Option<QueryMap>,
    pub ledger: BudgetLedger,
    pub fused: FusedMap,
    pub boxes: Vec<RotatedBox>,
}

pub fn run_exchange(
    scene: &PreparedScene,
    method: Method,
    q_max: f64,
    scorer: &Scorer,
    attention: &AttentionParams,
    settings: &Settings,
) -> Result<Exchange, Error> {
    let mut ledger = BudgetLedger::default();
    let (input, query_map) = match method {
        Method::Single => (FusionInput::single(&scene.ego), None),
        Method::Directed | Method::Uniform => {
            let qcm = scene.score(method, scorer)?;
            let mut qm = clip_queries(&qcm, q_max, settings.tie_break);
            qm.q0_mode = settings.q0_mode;
            let (h, w) = (scene.grid.height, scene.grid.width);
            let mut received = Vec::with_capacity(scene.collaborators.len());
            for (k, features) in scene.collaborators.iter().enumerate() {
                if qm.activated(k) == 0 {
                    // Nothing requested: no message goes out.
                    received.push(SparseFeatureMap::empty(h, w, features.channels));
                    continue;
                }
                let msg = build_message(&qm.bits[k], features, (k + 1) as u16, 0)?;
                let bytes = serialize(&msg);
                let delivered = deserialize(&bytes, h, w)?;
                ledger.record(&delivered);
                received.push(delivered.to_sparse(h, w));
            }
            (FusionInput::from_messages(&scene.ego, &received, &qcm)?, Some(qm))
        }
    };
    let fused = fuse_all(&input, attention)?;
    let boxes = crate::fusion::decode(&fused, settings.conf_threshold);
    Ok(Exchange {
        method,
        query_map,
        ledger,
        fused,
        boxes,
    })
}

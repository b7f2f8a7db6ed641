//! Data collection with parallel workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Episode, Provenance, TrajectoryDataset};
use super::spriteworld::{AnnotatedFrame, SpriteWorld, SpriteWorldConfig, ACTIONS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Random,
    /// Chases the ball; takes a uniformly random action with probability ε.
    Scripted,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Scripted => "scripted",
        }
    }

    pub fn from_name(name: &str) -> Option<Policy> {
        match name {
            "random" => Some(Policy::Random),
            "scripted" => Some(Policy::Scripted),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    pub env: SpriteWorldConfig,
    pub policy: Policy,
    pub epsilon: f64,
    pub workers: usize,
    pub frames_per_worker: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            env: SpriteWorldConfig::default(),
            policy: Policy::Random,
            epsilon: 0.2,
            workers: 8,
            frames_per_worker: 625,
            seed: 0,
        }
    }
}

/// Goal heuristic: step along the axis with the larger offset to the ball.
pub fn scripted_action(env: &SpriteWorld) -> usize {
    let c = env.config();
    let centre = |p: usize, size: usize| 2 * p as i64 + size as i64;
    let (ax, ay) = env.agent();
    let (bx, by) = env.ball();
    let dx = centre(bx, c.ball_size) - centre(ax, c.agent_size);
    let dy = centre(by, c.ball_size) - centre(ay, c.agent_size);
    if dx == 0 && dy == 0 {
        0
    } else if dx.abs() >= dy.abs() {
        if dx > 0 {
            4
        } else {
            3
        }
    } else if dy > 0 {
        2
    } else {
        1
    }
}

/// Picks an action for `policy`. Every call consumes the same random draws,
/// so the scripted policy at ε = 1 replays the random policy exactly.
pub fn choose_action(policy: Policy, epsilon: f64, env: &SpriteWorld, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let random = rng.random_range(0..ACTIONS.len());
    match policy {
        Policy::Random => random,
        Policy::Scripted if u < epsilon => random,
        Policy::Scripted => scripted_action(env),
    }
}

fn run_worker(cfg: &CollectConfig, worker: usize) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(worker as u64 + 1);
    let mut env = SpriteWorld::new(cfg.env.clone())?;
    let mut episodes = Vec::new();
    let mut remaining = cfg.frames_per_worker;
    let mut index = 0u64;
    let push = |ep: &mut Episode, f: &AnnotatedFrame| {
        ep.timesteps.push(f.t);
        ep.pixels.extend_from_slice(&f.pixels);
        ep.labels.extend(f.labels_in_order(&cfg.env));
    };
    while remaining > 0 {
        let mut ep = Episode {
            id: ((worker as u64) << 32) | index,
            timesteps: Vec::new(),
            pixels: Vec::new(),
            labels: Vec::new(),
        };
        index += 1;
        let mut frame = env.reset(rng.random());
        push(&mut ep, &frame);
        remaining -= 1;
        while remaining > 0 && !env.episode_done() {
            let a = choose_action(cfg.policy, cfg.epsilon, &env, &mut rng);
            frame = env.step(a)?;
            push(&mut ep, &frame);
            remaining -= 1;
        }
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Runs `workers` independent collectors and merges them in worker order.
pub fn collect(cfg: &CollectConfig) -> Result<TrajectoryDataset> {
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [0, 1], got {}", cfg.epsilon)));
    }
    if cfg.workers == 0 || cfg.frames_per_worker == 0 {
        return Err(Error::Config("workers and frames_per_worker must be positive".into()));
    }
    cfg.env.validate()?;
    let per_worker: Vec<Result<Vec<Episode>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.workers).map(|w| s.spawn(move || run_worker(cfg, w))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("collection worker panicked"))
            .collect()
    });
    let mut episodes = Vec::new();
    for r in per_worker {
        episodes.extend(r?);
    }
    TrajectoryDataset::new(
        cfg.env.env_id(),
        cfg.env.size,
        cfg.env.size,
        cfg.env.variables(),
        Provenance {
            policy: cfg.policy.name().to_string(),
            epsilon: cfg.epsilon,
            seed: cfg.seed,
            workers: cfg.workers as u32,
        },
        episodes,
    )
}

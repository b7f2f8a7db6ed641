//! SpriteWorld: a small annotated arcade-style environment.
//!
//! The frame is a 64×64 grayscale image. Rows `0..STRIP` hold the score
//! strip; the rest is the play field. All coordinates are pixel positions of
//! a sprite's top-left corner, and every label is a byte.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Height of the score strip at the top of the frame.
pub const STRIP: usize = 8;

pub const ACTIONS: [&str; 5] = ["noop", "up", "down", "left", "right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    AgentLoc,
    SmallLoc,
    OtherLoc,
    ScoreClockLivesDisplay,
    Misc,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::AgentLoc,
        Category::SmallLoc,
        Category::OtherLoc,
        Category::ScoreClockLivesDisplay,
        Category::Misc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::AgentLoc => "AgentLoc",
            Category::SmallLoc => "SmallLoc",
            Category::OtherLoc => "OtherLoc",
            Category::ScoreClockLivesDisplay => "ScoreClockLivesDisplay",
            Category::Misc => "Misc",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Category> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableSpec {
    pub name: String,
    pub category: Category,
    pub min: u8,
    pub max: u8,
}

impl VariableSpec {
    pub fn new(name: &str, category: Category, min: u8, max: u8) -> Self {
        Self {
            name: name.to_string(),
            category,
            min,
            max,
        }
    }
}

/// One observation with its ground-truth labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedFrame {
    /// Row-major 8-bit intensities; intensity `v` stands for `v / 255`.
    pub pixels: Vec<u8>,
    pub labels: BTreeMap<String, u8>,
    pub episode: u64,
    pub t: u32,
}

impl AnnotatedFrame {
    pub fn label(&self, name: &str) -> Option<u8> {
        self.labels.get(name).copied()
    }

    /// Labels in the variable-table order of `env`.
    pub fn labels_in_order(&self, env: &SpriteWorldConfig) -> Vec<u8> {
        env.variables().iter().map(|v| self.labels[&v.name]).collect()
    }
}

/// Visual theme. `Foreign` is a different-looking game used as a source of
/// out-of-environment negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Standard,
    Foreign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteWorldConfig {
    pub size: usize,
    pub agent_size: usize,
    pub agent_speed: usize,
    pub ball_size: usize,
    pub enemy_size: usize,
    /// Fixed row (top edge) of each patrolling enemy.
    pub enemy_rows: Vec<usize>,
    pub enemy_speeds: Vec<usize>,
    /// Steps between background switches.
    pub room_period: u32,
    pub episode_len: u32,
    /// Render a constant lives counter that probes should prune.
    pub lives_decoy: bool,
    pub style: Style,
}

impl Default for SpriteWorldConfig {
    fn default() -> Self {
        Self {
            size: 64,
            agent_size: 4,
            agent_speed: 2,
            ball_size: 2,
            enemy_size: 4,
            enemy_rows: vec![22, 44],
            enemy_speeds: vec![1, 2],
            room_period: 128,
            episode_len: 512,
            lives_decoy: true,
            style: Style::Standard,
        }
    }
}

impl SpriteWorldConfig {
    pub fn foreign() -> Self {
        Self {
            enemy_rows: vec![30, 50],
            enemy_speeds: vec![2, 3],
            style: Style::Foreign,
            ..Self::default()
        }
    }

    pub fn env_id(&self) -> String {
        match self.style {
            Style::Standard => "spriteworld".into(),
            Style::Foreign => "spriteworld-foreign".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = self.size.checked_sub(STRIP).unwrap_or(0);
        let biggest = self.agent_size.max(self.ball_size).max(self.enemy_size);
        if self.size > 255 || field < 2 * biggest || biggest == 0 {
            return Err(Error::Config(format!(
                "frame size {} cannot hold sprites of size {biggest}",
                self.size
            )));
        }
        if self.ball_size * self.ball_size > 4 {
            return Err(Error::Config(format!(
                "small object covers {} px (at most 4 allowed)",
                self.ball_size * self.ball_size
            )));
        }
        if self.enemy_rows.len() != self.enemy_speeds.len() {
            return Err(Error::Config("enemy_rows and enemy_speeds differ in length".into()));
        }
        for &r in &self.enemy_rows {
            if r < STRIP || r + self.enemy_size > self.size {
                return Err(Error::Config(format!("enemy row {r} outside the play field")));
            }
        }
        if self.agent_speed == 0 || self.room_period == 0 || self.episode_len == 0 {
            return Err(Error::Config("speeds, room period and episode length must be positive".into()));
        }
        Ok(())
    }

    pub fn variables(&self) -> Vec<VariableSpec> {
        let s = self.size;
        let mut v = vec![
            VariableSpec::new("agent_x", Category::AgentLoc, 0, (s - self.agent_size) as u8),
            VariableSpec::new("agent_y", Category::AgentLoc, STRIP as u8, (s - self.agent_size) as u8),
            VariableSpec::new("ball_x", Category::SmallLoc, 0, (s - self.ball_size) as u8),
            VariableSpec::new("ball_y", Category::SmallLoc, STRIP as u8, (s - self.ball_size) as u8),
        ];
        for i in 0..self.enemy_rows.len() {
            v.push(VariableSpec::new(
                &format!("enemy{}_x", i + 1),
                Category::OtherLoc,
                0,
                (s - self.enemy_size) as u8,
            ));
        }
        v.push(VariableSpec::new("score", Category::ScoreClockLivesDisplay, 0, 255));
        if self.lives_decoy {
            v.push(VariableSpec::new("lives", Category::ScoreClockLivesDisplay, 3, 3));
        }
        v.push(VariableSpec::new("room", Category::Misc, 0, 1));
        v
    }
}

const AGENT: u8 = 255;
const BALL: u8 = 200;
const ENEMY: u8 = 150;
const STRIPE: u8 = 50;
const DIGIT: u8 = 255;

#[derive(Clone, Debug)]
struct State {
    agent: (usize, usize),
    ball: (usize, usize),
    ball_v: (i32, i32),
    enemies: Vec<(usize, i32)>,
    score: u8,
    t: u32,
}

#[derive(Clone, Debug)]
pub struct SpriteWorld {
    config: SpriteWorldConfig,
    rng: ChaCha8Rng,
    state: State,
    episode: u64,
}

impl SpriteWorld {
    pub fn new(config: SpriteWorldConfig) -> Result<Self> {
        config.validate()?;
        let state = State {
            agent: (0, STRIP),
            ball: (0, STRIP),
            ball_v: (1, 1),
            enemies: vec![(0, 1); config.enemy_rows.len()],
            score: 0,
            t: 0,
        };
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(0),
            state,
            episode: 0,
        })
    }

    pub fn config(&self) -> &SpriteWorldConfig {
        &self.config
    }

    pub fn n_actions(&self) -> usize {
        ACTIONS.len()
    }

    pub fn variables(&self) -> Vec<VariableSpec> {
        self.config.variables()
    }

    /// Current ball position; used by the scripted policy.
    pub fn ball(&self) -> (usize, usize) {
        self.state.ball
    }

    pub fn agent(&self) -> (usize, usize) {
        self.state.agent
    }

    pub fn episode_done(&self) -> bool {
        self.state.t + 1 >= self.config.episode_len
    }

    /// Starts a new episode; the start state is drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> AnnotatedFrame {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        let s = c.size;
        let agent = (
            self.rng.random_range(0..=s - c.agent_size),
            self.rng.random_range(STRIP..=s - c.agent_size),
        );
        let ball = (
            self.rng.random_range(0..=s - c.ball_size),
            self.rng.random_range(STRIP..=s - c.ball_size),
        );
        let speeds = [-2, -1, 1, 2];
        let ball_v = (speeds[self.rng.random_range(0..4)], speeds[self.rng.random_range(0..4)]);
        let enemies = c
            .enemy_speeds
            .iter()
            .map(|&sp| {
                let dir = if self.rng.random_bool(0.5) { 1 } else { -1 };
                (self.rng.random_range(0..=s - c.enemy_size), dir * sp as i32)
            })
            .collect();
        self.state = State {
            agent,
            ball,
            ball_v,
            enemies,
            score: 0,
            t: 0,
        };
        self.episode = seed;
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<AnnotatedFrame> {
        if action >= ACTIONS.len() {
            return Err(Error::InvalidAction {
                action,
                n_actions: ACTIONS.len(),
            });
        }
        let c = self.config.clone();
        let s = c.size;
        let st = &mut self.state;
        let sp = c.agent_speed;
        let (ax, ay) = st.agent;
        st.agent = match action {
            1 => (ax, ay.saturating_sub(sp).max(STRIP)),
            2 => (ax, (ay + sp).min(s - c.agent_size)),
            3 => (ax.saturating_sub(sp), ay),
            4 => ((ax + sp).min(s - c.agent_size), ay),
            _ => (ax, ay),
        };

        for e in &mut st.enemies {
            let max = (s - c.enemy_size) as i32;
            let mut x = e.0 as i32 + e.1;
            if x < 0 || x > max {
                e.1 = -e.1;
                x = x.clamp(0, max);
            }
            e.0 = x as usize;
        }

        // ball: move, bounce off the walls, then off the agent
        let (bx, by) = (st.ball.0 as i32, st.ball.1 as i32);
        let (mut vx, mut vy) = st.ball_v;
        let mut nx = bx + vx;
        let mut ny = by + vy;
        let (xmax, ymin, ymax) = ((s - c.ball_size) as i32, STRIP as i32, (s - c.ball_size) as i32);
        let mut contacts = 0u8;
        if nx < 0 || nx > xmax {
            vx = -vx;
            nx = nx.clamp(0, xmax);
            contacts = 1;
        }
        if ny < ymin || ny > ymax {
            vy = -vy;
            ny = ny.clamp(ymin, ymax);
            contacts = 1;
        }
        let hits_agent = overlaps(
            (nx as usize, ny as usize, c.ball_size),
            (st.agent.0, st.agent.1, c.agent_size),
        );
        if hits_agent {
            vx = -vx;
            vy = -vy;
            nx = bx;
            ny = by;
            contacts = 1;
        }
        st.ball = (nx as usize, ny as usize);
        st.ball_v = (vx, vy);
        st.score = st.score.wrapping_add(contacts);
        st.t += 1;
        Ok(self.observe())
    }

    pub fn labels(&self) -> BTreeMap<String, u8> {
        let st = &self.state;
        let mut m = BTreeMap::new();
        m.insert("agent_x".to_string(), st.agent.0 as u8);
        m.insert("agent_y".to_string(), st.agent.1 as u8);
        m.insert("ball_x".to_string(), st.ball.0 as u8);
        m.insert("ball_y".to_string(), st.ball.1 as u8);
        for (i, e) in st.enemies.iter().enumerate() {
            m.insert(format!("enemy{}_x", i + 1), e.0 as u8);
        }
        m.insert("score".to_string(), st.score);
        if self.config.lives_decoy {
            m.insert("lives".to_string(), 3);
        }
        m.insert("room".to_string(), ((st.t / self.config.room_period) % 2) as u8);
        m
    }

    fn observe(&self) -> AnnotatedFrame {
        let labels = self.labels();
        AnnotatedFrame {
            pixels: render(&self.config, &labels).expect("labels come from the simulator"),
            labels,
            episode: self.episode,
            t: self.state.t,
        }
    }
}

/// Background texel. Every 16×16 tile of the play field carries its own
/// stripe direction and period, so a local patch of background tells where
/// in the frame it sits. The two rooms use different tile layouts.
fn tile_pattern(x: usize, y: usize, room: usize) -> bool {
    let tile = (y - STRIP) / 16 * 4 + x / 16 + 16 * room;
    let period = 3 + (tile * 7) % 4;
    match (tile * 5 + tile / 3) % 4 {
        0 => y % period == 0,
        1 => x % period == 0,
        2 => (x + y) % period == 0,
        _ => (x + 64 - y % 64) % period == 0,
    }
}

fn overlaps(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.2 && b.1 < a.1 + a.2
}

/// Draws a frame from labels alone.
pub fn render(config: &SpriteWorldConfig, labels: &BTreeMap<String, u8>) -> Result<Vec<u8>> {
    let get = |name: &str| {
        labels
            .get(name)
            .map(|&v| v as usize)
            .ok_or_else(|| Error::Contract(format!("render: missing label `{name}`")))
    };
    let s = config.size;
    let mut img = vec![0u8; s * s];
    let mut fill = |x: usize, y: usize, w: usize, h: usize, v: u8| {
        for yy in y..(y + h).min(s) {
            for xx in x..(x + w).min(s) {
                img[yy * s + xx] = v;
            }
        }
    };

    let room = get("room")?;
    for y in STRIP..s {
        for x in 0..s {
            let on = match (config.style, room) {
                (Style::Standard, r) => tile_pattern(x, y, r),
                (Style::Foreign, 0) => (x / 4 + y / 4) % 2 == 0,
                (Style::Foreign, _) => (x / 2 + y / 6) % 3 == 0,
            };
            if on {
                fill(x, y, 1, 1, STRIPE);
            }
        }
    }

    let (enemy, agent, ball) = match config.style {
        Style::Standard => (ENEMY, AGENT, BALL),
        Style::Foreign => (90, 120, 255),
    };
    for (i, &row) in config.enemy_rows.iter().enumerate() {
        let x = get(&format!("enemy{}_x", i + 1))?;
        fill(x, row, config.enemy_size, config.enemy_size, enemy);
    }
    fill(get("agent_x")?, get("agent_y")?, config.agent_size, config.agent_size, agent);
    fill(get("ball_x")?, get("ball_y")?, config.ball_size, config.ball_size, ball);

    // score strip: one bar per decimal digit, 2 px per unit
    let score = get("score")?;
    for (i, digit) in [score / 100, (score / 10) % 10, score % 10].into_iter().enumerate() {
        fill(2 + 20 * i, 2, 2 * digit, 4, DIGIT);
    }
    if config.lives_decoy {
        for i in 0..get("lives")?.min(3) {
            fill(s - 2, 1 + 2 * i, 1, 1, DIGIT);
        }
    }
    Ok(img)
}

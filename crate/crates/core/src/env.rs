//! The 5×5 navigation grid used as ground truth.
//!
//! The latent dynamics are deterministic: each action moves the agent one
//! cell (walls clamp), reaching the top-right cell ends the episode with +1,
//! every other step costs 0.1. What the agent *sees* depends on the
//! [`EmissionSpec`]: latent index plus random bits, latent index plus a
//! modulo counter, or a jittered 2-D coordinate.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the grid.
pub const GRID_SIDE: usize = 5;
/// Number of latent cells.
pub const NUM_STATES: usize = GRID_SIDE * GRID_SIDE;
/// Number of actions.
pub const NUM_ACTIONS: usize = 5;
/// Bottom-left cell.
pub const START_STATE: LatentState = LatentState(0);
/// Top-right cell.
pub const GOAL_STATE: LatentState = LatentState(24);
/// Reward for arriving at the goal.
pub const GOAL_REWARD: f64 = 1.0;
/// Reward for every other step.
pub const STEP_REWARD: f64 = -0.1;
/// Default hard cap on episode length.
pub const DEFAULT_EPISODE_CAP: u32 = 10_000;

const CELL_WIDTH: f64 = 1.0 / GRID_SIDE as f64;

/// Probability vector over the five actions.
pub type ActionProbs = [f64; NUM_ACTIONS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("latent index {0} outside 0..25")]
    InvalidLatent(usize),
    #[error("cannot step an episode that has already terminated")]
    EpisodeDone,
    #[error("observation {0:?} cannot be decoded under {1:?}")]
    Decode(Observation, EmissionSpec),
    #[error("emission arguments inconsistent with {0:?}")]
    EmissionMismatch(EmissionSpec),
}

/// Index of a grid cell, `row * 5 + col` with row 0 at the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatentState(u8);

impl LatentState {
    pub fn new(index: usize) -> Result<Self, EnvError> {
        if index < NUM_STATES {
            Ok(Self(index as u8))
        } else {
            Err(EnvError::InvalidLatent(index))
        }
    }

    pub fn from_cell(col: usize, row: usize) -> Result<Self, EnvError> {
        if col >= GRID_SIDE || row >= GRID_SIDE {
            return Err(EnvError::InvalidLatent(row * GRID_SIDE + col));
        }
        Ok(Self((row * GRID_SIDE + col) as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn col(self) -> usize {
        self.index() % GRID_SIDE
    }

    pub fn row(self) -> usize {
        self.index() / GRID_SIDE
    }

    pub fn is_goal(self) -> bool {
        self == GOAL_STATE
    }

    /// Deterministic successor; moves off the grid leave the agent in place.
    pub fn successor(self, action: Action) -> Self {
        let (col, row) = (self.col(), self.row());
        let (col, row) = match action {
            Action::Stay => (col, row),
            Action::Up => (col, (row + 1).min(GRID_SIDE - 1)),
            Action::Right => ((col + 1).min(GRID_SIDE - 1), row),
            Action::Down => (col, row.saturating_sub(1)),
            Action::Left => (col.saturating_sub(1), row),
        };
        Self((row * GRID_SIDE + col) as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Stay = 0,
    Up = 1,
    Right = 2,
    Down = 3,
    Left = 4,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::Stay, Action::Up, Action::Right, Action::Down, Action::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

/// What the agent observes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    DiscreteId(u64),
    Vec2([f64; 2]),
}

impl Observation {
    pub fn as_discrete(&self) -> Option<u64> {
        match *self {
            Observation::DiscreteId(id) => Some(id),
            Observation::Vec2(_) => None,
        }
    }

    /// A key that is equal for equal observations. Discrete ids map to
    /// themselves; coordinates are hashed from their bit patterns.
    pub fn identity_key(&self) -> u64 {
        match *self {
            Observation::DiscreteId(id) => id,
            Observation::Vec2([a, b]) => {
                let mut h = a.to_bits() ^ 0x9e37_79b9_7f4a_7c15;
                h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
                h ^= b.to_bits().rotate_left(29);
                h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
                // Keep hashed keys out of the small-integer range used by discrete ids.
                h | (1 << 63)
            }
        }
    }
}

/// How latent cells are rendered into observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum EmissionSpec {
    /// `x = s + (b1 + 2 b2 + ... + 2^(k-1) bk) * 25` with fresh fair bits per call.
    NoiseBits { k: u32 },
    /// `x = s + c * 25`; `c` advances by one (mod C) every step.
    Counter { modulus: u32 },
    /// Per axis `cell * 0.2 + U[0, noise_width)`.
    #[serde(rename = "continuous_2d")]
    Continuous2D { noise_width: f64 },
}

impl EmissionSpec {
    pub fn has_counter(&self) -> bool {
        matches!(self, EmissionSpec::Counter { .. })
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, EmissionSpec::Continuous2D { .. })
    }

    /// Size of the discrete observation space, if any.
    pub fn num_observations(&self) -> Option<u64> {
        match *self {
            EmissionSpec::NoiseBits { k } => Some(NUM_STATES as u64 * (1u64 << k)),
            EmissionSpec::Counter { modulus } => Some(NUM_STATES as u64 * modulus as u64),
            EmissionSpec::Continuous2D { .. } => None,
        }
    }

    /// Every discrete observation the start cell can emit.
    pub fn start_observation_ids(&self) -> Option<Vec<u64>> {
        let copies = match *self {
            EmissionSpec::NoiseBits { k } => 1u64 << k,
            EmissionSpec::Counter { modulus } => modulus as u64,
            EmissionSpec::Continuous2D { .. } => return None,
        };
        Some(
            (0..copies)
                .map(|c| START_STATE.index() as u64 + c * NUM_STATES as u64)
                .collect(),
        )
    }
}

/// Observation for the noise-bits emission with an explicit bit pattern
/// (`bits` bit `i` is `b_{i+1}`).
pub fn noise_bits_observation(latent: LatentState, bits: u64) -> Observation {
    Observation::DiscreteId(latent.index() as u64 + bits * NUM_STATES as u64)
}

/// Observation for the counter emission.
pub fn counter_observation(latent: LatentState, counter: u32) -> Observation {
    Observation::DiscreteId(latent.index() as u64 + counter as u64 * NUM_STATES as u64)
}

/// Coordinate for one axis: `cell * 0.2 + offset`, kept strictly inside the cell.
fn axis_coordinate(cell: usize, offset: f64) -> f64 {
    let mut v = cell as f64 * CELL_WIDTH + offset;
    while axis_cell(v) > cell {
        v = v.next_down();
    }
    while axis_cell(v) < cell {
        v = v.next_up();
    }
    v
}

fn axis_cell(v: f64) -> usize {
    (v * GRID_SIDE as f64).floor() as usize
}

/// Render a latent cell into an observation.
///
/// `exo_counter` must be supplied exactly when the emission is `Counter`.
pub fn emit<R: Rng + ?Sized>(
    latent: LatentState,
    exo_counter: Option<u32>,
    spec: &EmissionSpec,
    rng: &mut R,
) -> Result<Observation, EnvError> {
    match (*spec, exo_counter) {
        (EmissionSpec::NoiseBits { k }, None) => {
            let bits = if k == 0 { 0 } else { rng.random_range(0..(1u64 << k)) };
            Ok(noise_bits_observation(latent, bits))
        }
        (EmissionSpec::Counter { modulus }, Some(c)) if c < modulus => {
            Ok(counter_observation(latent, c))
        }
        (EmissionSpec::Continuous2D { noise_width }, None) => {
            let ux = rng.random::<f64>() * noise_width;
            let uy = rng.random::<f64>() * noise_width;
            Ok(Observation::Vec2([
                axis_coordinate(latent.col(), ux),
                axis_coordinate(latent.row(), uy),
            ]))
        }
        _ => Err(EnvError::EmissionMismatch(*spec)),
    }
}

/// Recover the latent cell (and counter, for the counter emission) that
/// produced an observation.
pub fn oracle_decode(
    x: &Observation,
    spec: &EmissionSpec,
) -> Result<(LatentState, Option<u32>), EnvError> {
    let fail = || EnvError::Decode(*x, *spec);
    match (*x, *spec) {
        (Observation::DiscreteId(id), EmissionSpec::NoiseBits { .. })
        | (Observation::DiscreteId(id), EmissionSpec::Counter { .. }) => {
            if id >= spec.num_observations().unwrap_or(0) {
                return Err(fail());
            }
            let latent = LatentState((id % NUM_STATES as u64) as u8);
            let counter = spec
                .has_counter()
                .then_some((id / NUM_STATES as u64) as u32);
            Ok((latent, counter))
        }
        (Observation::Vec2([a, b]), EmissionSpec::Continuous2D { .. }) => {
            if !(0.0..1.0).contains(&a) || !(0.0..1.0).contains(&b) {
                return Err(fail());
            }
            Ok((LatentState::from_cell(axis_cell(a), axis_cell(b)).map_err(|_| fail())?, None))
        }
        _ => Err(fail()),
    }
}

/// Everything needed to step an episode forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub latent: LatentState,
    pub exo_counter: Option<u32>,
    pub step_count: u32,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub observation: Observation,
    /// The episode hit the safety cap without reaching the goal.
    pub capped: bool,
}

/// A grid instance: emission variant plus episode cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    pub emission: EmissionSpec,
    pub episode_cap: u32,
}

impl GridWorld {
    pub fn new(emission: EmissionSpec) -> Self {
        Self {
            emission,
            episode_cap: DEFAULT_EPISODE_CAP,
        }
    }

    pub fn with_episode_cap(mut self, cap: u32) -> Self {
        self.episode_cap = cap;
        self
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (EnvState, Observation) {
        let exo_counter = match self.emission {
            EmissionSpec::Counter { modulus } => Some(rng.random_range(0..modulus)),
            _ => None,
        };
        let state = EnvState {
            latent: START_STATE,
            exo_counter,
            step_count: 0,
            done: false,
        };
        let x = emit(state.latent, exo_counter, &self.emission, rng)
            .expect("reset always produces spec-consistent arguments");
        (state, x)
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &EnvState,
        action: Action,
        rng: &mut R,
    ) -> Result<StepOutcome, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeDone);
        }
        let latent = state.latent.successor(action);
        let done = latent.is_goal();
        let reward = if done { GOAL_REWARD } else { STEP_REWARD };
        let exo_counter = match (self.emission, state.exo_counter) {
            (EmissionSpec::Counter { modulus }, Some(c)) => Some((c + 1) % modulus),
            (EmissionSpec::Counter { .. }, None) => {
                return Err(EnvError::EmissionMismatch(self.emission))
            }
            _ => None,
        };
        let step_count = state.step_count + 1;
        let next = EnvState {
            latent,
            exo_counter,
            step_count,
            done,
        };
        let observation = emit(latent, exo_counter, &self.emission, rng)?;
        Ok(StepOutcome {
            state: next,
            reward,
            done,
            observation,
            capped: !done && step_count >= self.episode_cap,
        })
    }

    /// Reward and termination for arriving in a cell.
    pub fn arrival(latent: LatentState) -> (f64, bool) {
        if latent.is_goal() {
            (GOAL_REWARD, true)
        } else {
            (STEP_REWARD, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(i: usize) -> LatentState {
        LatentState::new(i).unwrap()
    }

    fn at(world: &GridWorld, i: usize) -> EnvState {
        EnvState {
            latent: latent(i),
            exo_counter: world.emission.has_counter().then_some(0),
            step_count: 0,
            done: false,
        }
    }

    #[test]
    fn step_examples() {
        let world = GridWorld::new(EmissionSpec::NoiseBits { k: 0 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let out = world.step(&at(&world, 0), Action::Right, &mut rng).unwrap();
        assert_eq!(out.state.latent.index(), 1);
        assert_eq!(out.reward, -0.1);
        assert!(!out.done);

        let out = world.step(&at(&world, 0), Action::Left, &mut rng).unwrap();
        assert_eq!(out.state.latent.index(), 0);
        assert_eq!(out.reward, -0.1);

        let out = world.step(&at(&world, 23), Action::Right, &mut rng).unwrap();
        assert_eq!(out.state.latent.index(), 24);
        assert_eq!(out.reward, 1.0);
        assert!(out.done);

        let out = world.step(&at(&world, 7), Action::Stay, &mut rng).unwrap();
        assert_eq!(out.state.latent.index(), 7);
    }

    #[test]
    fn stepping_a_finished_episode_fails() {
        let world = GridWorld::new(EmissionSpec::NoiseBits { k: 0 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = world.step(&at(&world, 23), Action::Right, &mut rng).unwrap();
        assert_eq!(
            world.step(&out.state, Action::Stay, &mut rng),
            Err(EnvError::EpisodeDone)
        );
    }

    #[test]
    fn emission_examples() {
        let spec = EmissionSpec::NoiseBits { k: 4 };
        // bits (b1..b4) = (1,0,1,0) -> 1 + 4
        assert_eq!(noise_bits_observation(latent(0), 0b0101), Observation::DiscreteId(125));
        assert_eq!(
            oracle_decode(&Observation::DiscreteId(125), &spec).unwrap(),
            (latent(0), None)
        );

        let counter = EmissionSpec::Counter { modulus: 32 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = emit(latent(3), Some(2), &counter, &mut rng).unwrap();
        assert_eq!(x, Observation::DiscreteId(53));
        assert_eq!(oracle_decode(&x, &counter).unwrap(), (latent(3), Some(2)));

        let zero = EmissionSpec::NoiseBits { k: 0 };
        for s in 0..NUM_STATES {
            assert_eq!(
                emit(latent(s), None, &zero, &mut rng).unwrap(),
                Observation::DiscreteId(s as u64)
            );
        }
    }

    #[test]
    fn continuous_emission_stays_in_cell() {
        let spec = EmissionSpec::Continuous2D { noise_width: 0.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let Observation::Vec2([a, b]) = emit(latent(12), None, &spec, &mut rng).unwrap() else {
                panic!("expected coordinates");
            };
            assert!((0.4..0.6).contains(&a) && (0.4..0.6).contains(&b), "{a} {b}");
        }
        assert_eq!(
            oracle_decode(&Observation::Vec2([0.41, 0.55]), &spec).unwrap().0,
            latent(12)
        );
        // Edge offsets that would round into the neighbouring cell.
        for cell in 0..GRID_SIDE {
            let v = axis_coordinate(cell, 0.2f64.next_down());
            assert_eq!(axis_cell(v), cell);
            assert!(v < 1.0);
        }
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let spec = EmissionSpec::Counter { modulus: 4 };
        assert!(oracle_decode(&Observation::DiscreteId(100), &spec).is_err());
        let cont = EmissionSpec::Continuous2D { noise_width: 0.2 };
        assert!(oracle_decode(&Observation::Vec2([1.0, 0.5]), &cont).is_err());
        assert!(oracle_decode(&Observation::DiscreteId(3), &cont).is_err());
        assert!(emit(latent(0), None, &spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn reset_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = GridWorld::new(EmissionSpec::NoiseBits { k: 4 });
        let counter = GridWorld::new(EmissionSpec::Counter { modulus: 32 });
        let cont = GridWorld::new(EmissionSpec::Continuous2D { noise_width: 0.2 });
        for _ in 0..200 {
            let (s, x) = noise.reset(&mut rng);
            assert_eq!(s.latent, START_STATE);
            assert_eq!(x.as_discrete().unwrap() % 25, 0);
            assert!(x.as_discrete().unwrap() < 400);

            let (s, x) = counter.reset(&mut rng);
            let id = x.as_discrete().unwrap();
            assert_eq!(id % 25, 0);
            assert_eq!(s.exo_counter, Some((id / 25) as u32));

            let (_, x) = cont.reset(&mut rng);
            let Observation::Vec2([a, b]) = x else { panic!() };
            assert!((0.0..0.2).contains(&a) && (0.0..0.2).contains(&b));
        }
    }

    #[test]
    fn shortest_path_return() {
        let world = GridWorld::new(EmissionSpec::NoiseBits { k: 0 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut state, _) = world.reset(&mut rng);
        let plan = [Action::Up; 4].into_iter().chain([Action::Right; 4]);
        let mut total = 0.0;
        let mut steps = 0;
        for a in plan {
            let out = world.step(&state, a, &mut rng).unwrap();
            total += out.reward;
            steps += 1;
            state = out.state;
        }
        assert!(state.done);
        assert_eq!(steps, 8);
        assert!((total - 0.3).abs() < 1e-12);
    }

    #[test]
    fn episode_cap_is_flagged() {
        let world = GridWorld::new(EmissionSpec::NoiseBits { k: 0 }).with_episode_cap(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut state, _) = world.reset(&mut rng);
        let mut capped = false;
        for _ in 0..3 {
            let out = world.step(&state, Action::Stay, &mut rng).unwrap();
            capped = out.capped;
            state = out.state;
        }
        assert!(capped);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_spec() -> impl Strategy<Value = EmissionSpec> {
            prop_oneof![
                (0u32..6).prop_map(|k| EmissionSpec::NoiseBits { k }),
                (1u32..40).prop_map(|modulus| EmissionSpec::Counter { modulus }),
                Just(EmissionSpec::Continuous2D { noise_width: 0.2 }),
            ]
        }

        proptest! {
            #[test]
            fn emit_then_decode_round_trips(spec in any_spec(), s in 0usize..25, c in 0u32..1000, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let counter = match spec {
                    EmissionSpec::Counter { modulus } => Some(c % modulus),
                    _ => None,
                };
                let x = emit(latent(s), counter, &spec, &mut rng).unwrap();
                prop_assert_eq!(oracle_decode(&x, &spec).unwrap(), (latent(s), counter));
            }

            #[test]
            fn latent_step_is_deterministic(s in 0usize..24, a in 0usize..5, seed1: u64, seed2: u64) {
                let world = GridWorld::new(EmissionSpec::NoiseBits { k: 3 });
                let action = Action::from_index(a).unwrap();
                let o1 = world.step(&at(&world, s), action, &mut ChaCha8Rng::seed_from_u64(seed1)).unwrap();
                let o2 = world.step(&at(&world, s), action, &mut ChaCha8Rng::seed_from_u64(seed2)).unwrap();
                prop_assert_eq!(o1.state.latent, o2.state.latent);
                prop_assert_eq!(o1.reward, o2.reward);
                prop_assert_eq!(o1.done, o2.done);
            }

            #[test]
            fn counter_advances_modulo(modulus in 1u32..40, seed: u64, actions in proptest::collection::vec(0usize..5, 1..60)) {
                let world = GridWorld::new(EmissionSpec::Counter { modulus });
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (mut state, _) = world.reset(&mut rng);
                for a in actions {
                    if state.done { break; }
                    let out = world.step(&state, Action::from_index(a).unwrap(), &mut rng).unwrap();
                    prop_assert_eq!(out.state.exo_counter, Some((state.exo_counter.unwrap() + 1) % modulus));
                    prop_assert_eq!(oracle_decode(&out.observation, &world.emission).unwrap().1, out.state.exo_counter);
                    state = out.state;
                }
            }
        }
    }
}

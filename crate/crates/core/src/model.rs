//! State spaces, action sets, stage costs and one-step transition kernels.
//!
//! A device is described by its receiver AoI `a_r`, device AoI `a_d`, the
//! number of packets `d` still to deliver for the update in flight and, in the
//! random-arrival variant, the age `a_b` of the update waiting in its buffer.
//! All ages saturate at their configured caps.
//!
//! Joint states are indexed in mixed radix with device `K-1` most significant
//! and, within a device, `(a_b, a_d, a_r, d-1)` from most to least significant.
//! Raising any age of any device therefore raises the joint index, which the
//! structure-aware sweeps rely on.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Upper bound on the number of joint actions a model will enumerate.
pub const MAX_SYSTEM_ACTIONS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Devices sample a fresh update whenever they are told to.
    GenerateAtWill,
    /// Updates arrive as a Bernoulli process and wait in a one-slot buffer.
    RandomArrival,
    /// Sampling takes `tau` slots before the first packet can be sent.
    NonZeroGenerationTime,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::GenerateAtWill => "generate_at_will",
            ModelVariant::RandomArrival => "random_arrival",
            ModelVariant::NonZeroGenerationTime => "non_zero_generation_time",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate_at_will" => Ok(ModelVariant::GenerateAtWill),
            "random_arrival" => Ok(ModelVariant::RandomArrival),
            "non_zero_generation_time" => Ok(ModelVariant::NonZeroGenerationTime),
            other => Err(Error::InvalidConfig(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Per-device constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams {
    /// Packets per status update.
    #[serde(rename = "L")]
    pub packets: u32,
    /// Per-packet channel success probability.
    pub lambda: f64,
    /// Bernoulli arrival rate (random-arrival variant only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub cap_d: u32,
    pub cap_r: u32,
    /// Buffer AoI cap (random-arrival variant only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap_b: Option<u32>,
    /// Slots needed to generate an update (generation-time variant only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<u32>,
}

impl DeviceParams {
    pub fn new(packets: u32, lambda: f64, cap_d: u32, cap_r: u32) -> Self {
        DeviceParams { packets, lambda, rho: None, cap_d, cap_r, cap_b: None, tau: None }
    }

    /// Same caps for device and receiver AoI.
    pub fn uniform(packets: u32, lambda: f64, cap: u32) -> Self {
        Self::new(packets, lambda, cap, cap)
    }

    pub fn with_arrivals(mut self, rho: f64, cap_b: u32) -> Self {
        self.rho = Some(rho);
        self.cap_b = Some(cap_b);
        self
    }

    pub fn with_generation_time(mut self, tau: u32) -> Self {
        self.tau = Some(tau);
        self
    }

    pub fn validate(&self, variant: ModelVariant) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.packets < 2 {
            return bad(format!("L must be at least 2, got {}", self.packets));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if self.cap_d < 1 || self.cap_r < 1 {
            return bad("cap_d and cap_r must be at least 1".into());
        }
        match variant {
            ModelVariant::RandomArrival => {
                match self.rho {
                    Some(rho) if (0.0..=1.0).contains(&rho) => {}
                    Some(rho) => return bad(format!("rho must lie in [0, 1], got {rho}")),
                    None => return bad("random_arrival requires rho on every device".into()),
                }
                match self.cap_b {
                    Some(c) if c >= 1 => {}
                    _ => return bad("random_arrival requires cap_b >= 1 on every device".into()),
                }
            }
            ModelVariant::NonZeroGenerationTime => match self.tau {
                Some(t) if t >= 1 => {}
                _ => return bad("non_zero_generation_time requires tau >= 1 on every device".into()),
            },
            ModelVariant::GenerateAtWill => {}
        }
        Ok(())
    }

    /// Largest value of the remaining-packet counter.
    pub fn d_max(&self, variant: ModelVariant) -> u32 {
        match variant {
            ModelVariant::NonZeroGenerationTime => self.packets + self.tau.unwrap_or(1) - 1,
            _ => self.packets,
        }
    }

    fn buffer_cap(&self, variant: ModelVariant) -> u32 {
        match variant {
            ModelVariant::RandomArrival => self.cap_b.unwrap_or(0),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DeviceState {
    /// Buffer AoI; always 0 outside the random-arrival variant.
    pub a_b: u32,
    pub a_d: u32,
    pub a_r: u32,
    /// Remaining packets (or remaining generation slots beyond `L`).
    pub d: u32,
}

impl DeviceState {
    pub fn new(a_d: u32, a_r: u32, d: u32) -> Self {
        DeviceState { a_b: 0, a_d, a_r, d }
    }

    pub fn with_buffer(a_b: u32, a_d: u32, a_r: u32, d: u32) -> Self {
        DeviceState { a_b, a_d, a_r, d }
    }
}

/// Per-device control `(u, v)`: idle `(0,0)`, continue `(1,1)` or fresh `(1,2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum DeviceAction {
    Idle = 0,
    Continue = 1,
    Fresh = 2,
}

impl DeviceAction {
    pub const ALL: [DeviceAction; 3] = [DeviceAction::Idle, DeviceAction::Continue, DeviceAction::Fresh];

    pub fn is_scheduled(self) -> bool {
        self != DeviceAction::Idle
    }

    /// The `(u, v)` pair.
    pub fn pair(self) -> (u8, u8) {
        match self {
            DeviceAction::Idle => (0, 0),
            DeviceAction::Continue => (1, 1),
            DeviceAction::Fresh => (1, 2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceAction::Idle => "idle",
            DeviceAction::Continue => "continue",
            DeviceAction::Fresh => "fresh",
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DeviceAction::Idle),
            1 => Some(DeviceAction::Continue),
            2 => Some(DeviceAction::Fresh),
            _ => None,
        }
    }
}

impl fmt::Display for DeviceAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One [`DeviceAction`] per device.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemAction(pub Vec<DeviceAction>);

impl SystemAction {
    pub fn idle(k: usize) -> Self {
        SystemAction(vec![DeviceAction::Idle; k])
    }

    pub fn scheduled_count(&self) -> usize {
        self.0.iter().filter(|a| a.is_scheduled()).count()
    }

    pub fn scheduled_devices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, a)| a.is_scheduled()).map(|(k, _)| k)
    }

    pub fn has_fresh(&self, k: usize) -> bool {
        self.0[k] == DeviceAction::Fresh
    }

    /// Canonical action order: device 0 varies fastest, `Idle < Continue < Fresh`.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.0.iter().rev().cmp(other.0.iter().rev())
    }
}

impl fmt::Display for SystemAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            f.write_str(a.as_str())?;
        }
        Ok(())
    }
}

/// Joint state: one [`DeviceState`] per device.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemState {
    pub devices: Vec<DeviceState>,
}

impl SystemState {
    pub fn new(devices: Vec<DeviceState>) -> Self {
        SystemState { devices }
    }
}

/// Finite distribution over successor states with positive probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDistribution<S> {
    pub entries: Vec<(S, f64)>,
}

impl<S: PartialEq> TransitionDistribution<S> {
    fn push_merged(&mut self, s: S, p: f64) {
        if p <= 0.0 {
            return;
        }
        match self.entries.iter_mut().find(|(t, _)| *t == s) {
            Some(e) => e.1 += p,
            None => self.entries.push((s, p)),
        }
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn prob_of(&self, s: &S) -> f64 {
        self.entries.iter().filter(|(t, _)| t == s).map(|(_, p)| p).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn inc(x: u32, cap: u32) -> u32 {
    (x + 1).min(cap)
}

/// Generate-at-will successor for one realised channel outcome.
fn successor_generate_at_will(p: &DeviceParams, x: &DeviceState, w: DeviceAction, success: bool) -> DeviceState {
    let a_d = inc(x.a_d, p.cap_d);
    let a_r = inc(x.a_r, p.cap_r);
    match (w, success) {
        (DeviceAction::Continue, true) if x.d == 1 => DeviceState::new(0, inc(x.a_d, p.cap_r), p.packets),
        (DeviceAction::Continue, true) => DeviceState::new(a_d, a_r, x.d - 1),
        (DeviceAction::Fresh, true) => DeviceState::new(1, a_r, p.packets - 1),
        (DeviceAction::Fresh, false) => DeviceState::new(0, a_r, p.packets),
        (DeviceAction::Continue, false) | (DeviceAction::Idle, _) => DeviceState::new(a_d, a_r, x.d),
    }
}

/// Random-arrival successor for one realised (arrival, channel) outcome.
fn successor_random_arrival(
    p: &DeviceParams,
    x: &DeviceState,
    w: DeviceAction,
    success: bool,
    arrival: bool,
) -> DeviceState {
    let cap_b = p.cap_b.unwrap_or(1);
    let a_b = if arrival { 1 } else { inc(x.a_b, cap_b) };
    let a_d = inc(x.a_d, p.cap_d);
    let a_r = inc(x.a_r, p.cap_r);
    match (w, success) {
        (DeviceAction::Continue, true) if x.d == 1 => {
            DeviceState::with_buffer(a_b, a_b.min(p.cap_d), inc(x.a_d, p.cap_r), p.packets)
        }
        (DeviceAction::Continue, true) => DeviceState::with_buffer(a_b, a_d, a_r, x.d - 1),
        (DeviceAction::Fresh, true) => DeviceState::with_buffer(a_b, a_b.min(p.cap_d), a_r, p.packets - 1),
        (DeviceAction::Fresh, false) => DeviceState::with_buffer(a_b, a_b.min(p.cap_d), a_r, p.packets),
        (DeviceAction::Continue, false) | (DeviceAction::Idle, _) => DeviceState::with_buffer(a_b, a_d, a_r, x.d),
    }
}

/// Generation-time successor; `d > L` counts down the slots left to generate.
fn successor_generation_time(p: &DeviceParams, x: &DeviceState, w: DeviceAction, success: bool) -> DeviceState {
    let full = p.packets + p.tau.unwrap_or(1) - 1;
    let a_d = inc(x.a_d, p.cap_d);
    let a_r = inc(x.a_r, p.cap_r);
    match (w, success) {
        (DeviceAction::Continue, true) if x.d == 1 => DeviceState::new(0, inc(x.a_d, p.cap_r), full),
        (DeviceAction::Continue, true) => DeviceState::new(a_d, a_r, x.d - 1),
        (DeviceAction::Continue, false) => DeviceState::new(a_d, a_r, x.d),
        (DeviceAction::Fresh, _) => DeviceState::new(0, a_r, full),
        (DeviceAction::Idle, _) if x.d > p.packets => DeviceState::new(a_d, a_r, x.d - 1),
        (DeviceAction::Idle, _) => DeviceState::new(a_d, a_r, x.d),
    }
}

/// Successor of `x` under `w` for a realised channel outcome and arrival.
///
/// Outcomes that the variant ignores (the channel when idle, arrivals outside
/// the random-arrival model) have no effect. Feasibility is not checked.
pub fn device_successor(
    variant: ModelVariant,
    p: &DeviceParams,
    x: &DeviceState,
    w: DeviceAction,
    success: bool,
    arrival: bool,
) -> DeviceState {
    match variant {
        ModelVariant::GenerateAtWill => successor_generate_at_will(p, x, w, success),
        ModelVariant::RandomArrival => successor_random_arrival(p, x, w, success, arrival),
        ModelVariant::NonZeroGenerationTime => successor_generation_time(p, x, w, success),
    }
}

pub fn device_state_in_range(variant: ModelVariant, p: &DeviceParams, x: &DeviceState) -> bool {
    x.a_b <= p.buffer_cap(variant) && x.a_d <= p.cap_d && x.a_r <= p.cap_r && x.d >= 1 && x.d <= p.d_max(variant)
}

/// Whether `w` may be taken in `x`: fresh needs a buffered update in the
/// random-arrival model, and nothing but idle is allowed while an update is
/// still being generated.
pub fn device_action_feasible(variant: ModelVariant, p: &DeviceParams, x: &DeviceState, w: DeviceAction) -> bool {
    match (variant, w) {
        (_, DeviceAction::Idle) => true,
        (ModelVariant::RandomArrival, DeviceAction::Fresh) => x.a_b >= 1,
        (ModelVariant::NonZeroGenerationTime, _) => x.d <= p.packets,
        _ => true,
    }
}

fn checked_device(variant: ModelVariant, p: &DeviceParams, x: &DeviceState, w: DeviceAction) -> Result<()> {
    if !device_state_in_range(variant, p, x) {
        return Err(Error::StateOutOfRange(format!("{x:?} under {variant}")));
    }
    if !device_action_feasible(variant, p, x, w) {
        return Err(Error::InfeasibleAction(format!("{w} in {x:?} under {variant}")));
    }
    Ok(())
}

/// Exact one-step distribution of a single device under any variant.
pub fn device_transition_for(
    variant: ModelVariant,
    p: &DeviceParams,
    x: &DeviceState,
    w: DeviceAction,
) -> Result<TransitionDistribution<DeviceState>> {
    checked_device(variant, p, x, w)?;
    let lambda = p.lambda;
    let channel: SmallVec<[(bool, f64); 2]> = match (variant, w) {
        (_, DeviceAction::Idle) | (ModelVariant::NonZeroGenerationTime, DeviceAction::Fresh) => {
            smallvec::smallvec![(true, 1.0)]
        }
        _ => smallvec::smallvec![(true, lambda), (false, 1.0 - lambda)],
    };
    let arrivals: SmallVec<[(bool, f64); 2]> = match variant {
        ModelVariant::RandomArrival => {
            let rho = p.rho.unwrap_or(0.0);
            smallvec::smallvec![(true, rho), (false, 1.0 - rho)]
        }
        _ => smallvec::smallvec![(false, 1.0)],
    };
    let mut dist = TransitionDistribution { entries: Vec::with_capacity(4) };
    for &(arrival, pa) in &arrivals {
        for &(success, ps) in &channel {
            dist.push_merged(device_successor(variant, p, x, w, success, arrival), pa * ps);
        }
    }
    Ok(dist)
}

fn require_variant(expected: ModelVariant, p: &DeviceParams) -> Result<()> {
    p.validate(expected)
}

/// Generate-at-will device kernel.
pub fn device_transition(
    x: &DeviceState,
    w: DeviceAction,
    p: &DeviceParams,
) -> Result<TransitionDistribution<DeviceState>> {
    require_variant(ModelVariant::GenerateAtWill, p)?;
    device_transition_for(ModelVariant::GenerateAtWill, p, x, w)
}

/// Random-arrival device kernel; fresh is rejected on an empty buffer.
pub fn device_transition_random_arrival(
    x: &DeviceState,
    w: DeviceAction,
    p: &DeviceParams,
) -> Result<TransitionDistribution<DeviceState>> {
    require_variant(ModelVariant::RandomArrival, p)?;
    device_transition_for(ModelVariant::RandomArrival, p, x, w)
}

/// Generation-time device kernel; only idle is allowed while `d > L`.
pub fn device_transition_gen_time(
    x: &DeviceState,
    w: DeviceAction,
    p: &DeviceParams,
) -> Result<TransitionDistribution<DeviceState>> {
    require_variant(ModelVariant::NonZeroGenerationTime, p)?;
    device_transition_for(ModelVariant::NonZeroGenerationTime, p, x, w)
}

/// All states of one device in index order.
pub fn enumerate_device_states(params: &DeviceParams, variant: ModelVariant) -> Vec<DeviceState> {
    let mut out = Vec::new();
    for a_b in 0..=params.buffer_cap(variant) {
        for a_d in 0..=params.cap_d {
            for a_r in 0..=params.cap_r {
                for d in 1..=params.d_max(variant) {
                    out.push(DeviceState { a_b, a_d, a_r, d });
                }
            }
        }
    }
    out
}

/// Number of joint actions with at most `m` of `k` devices scheduled.
pub fn feasible_action_count(k: usize, m: usize) -> Option<u128> {
    let mut total: u128 = 0;
    let mut binom: u128 = 1;
    for j in 0..=m.min(k) {
        if j > 0 {
            binom = binom.checked_mul((k - j + 1) as u128)? / j as u128;
        }
        total = total.checked_add(binom.checked_mul(1u128.checked_shl(j as u32)?)?)?;
    }
    Some(total)
}

/// Every joint action with at most `m` scheduled devices, in canonical order.
pub fn feasible_system_actions(k: usize, m: usize) -> Vec<SystemAction> {
    fn rec(k: usize, m: usize, cur: &mut Vec<DeviceAction>, out: &mut Vec<SystemAction>) {
        if cur.len() == k {
            out.push(SystemAction(cur.clone()));
            return;
        }
        let used = cur.iter().filter(|a| a.is_scheduled()).count();
        for a in DeviceAction::ALL {
            if a.is_scheduled() && used >= m {
                continue;
            }
            cur.push(a);
            rec(k, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, m, &mut Vec::with_capacity(k), &mut out);
    out.sort_by(|a, b| a.canonical_cmp(b));
    out
}

/// Validated fleet description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub devices: Vec<DeviceParams>,
    /// Maximum number of devices scheduled per slot.
    pub m: usize,
    pub variant: ModelVariant,
}

impl SystemConfig {
    pub fn new(devices: Vec<DeviceParams>, m: usize, variant: ModelVariant) -> Result<Self> {
        let cfg = SystemConfig { devices, m, variant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::InvalidConfig("fleet must contain at least one device".into()));
        }
        if self.m > self.devices.len() {
            return Err(Error::InvalidConfig(format!(
                "M = {} exceeds the number of devices K = {}",
                self.m,
                self.devices.len()
            )));
        }
        for (k, d) in self.devices.iter().enumerate() {
            d.validate(self.variant).map_err(|e| Error::InvalidConfig(format!("device {k}: {e}")))?;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.devices.len()
    }

    /// Joint state count, `None` if it overflows `usize`.
    pub fn joint_state_count(&self) -> Option<usize> {
        self.devices.iter().try_fold(1usize, |acc, d| {
            let n = device_state_count(d, self.variant);
            acc.checked_mul(n)
        })
    }
}

fn device_state_count(p: &DeviceParams, variant: ModelVariant) -> usize {
    (p.buffer_cap(variant) as usize + 1) * (p.cap_d as usize + 1) * (p.cap_r as usize + 1) * p.d_max(variant) as usize
}

/// One device's state space together with its precomputed kernel.
#[derive(Debug, Clone)]
pub struct DeviceModel {
    params: DeviceParams,
    variant: ModelVariant,
    n_d: usize,
    n_r: usize,
    n_pk: usize,
    size: usize,
    /// `offsets[3 * s + w]..offsets[3 * s + w + 1]` indexes `entries`; an
    /// empty range marks an infeasible action.
    offsets: Vec<u32>,
    entries: Vec<(u32, f64)>,
}

impl DeviceModel {
    pub fn new(params: DeviceParams, variant: ModelVariant) -> Result<Self> {
        params.validate(variant)?;
        let n_b = params.buffer_cap(variant) as usize + 1;
        let n_d = params.cap_d as usize + 1;
        let n_r = params.cap_r as usize + 1;
        let n_pk = params.d_max(variant) as usize;
        let size = n_b * n_d * n_r * n_pk;
        let mut model = DeviceModel {
            params,
            variant,
            n_d,
            n_r,
            n_pk,
            size,
            offsets: Vec::with_capacity(3 * size + 1),
            entries: Vec::with_capacity(6 * size),
        };
        model.offsets.push(0);
        for s in 0..size {
            let x = model.state(s);
            for w in DeviceAction::ALL {
                if device_action_feasible(variant, &model.params, &x, w) {
                    let dist = device_transition_for(variant, &model.params, &x, w)?;
                    for (y, p) in dist.entries {
                        let idx = model.index(&y)?;
                        model.entries.push((idx as u32, p));
                    }
                }
                model.offsets.push(model.entries.len() as u32);
            }
        }
        Ok(model)
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Index stride of one step in `a_d`.
    pub fn a_d_stride(&self) -> usize {
        self.n_r * self.n_pk
    }

    pub fn a_r_stride(&self) -> usize {
        self.n_pk
    }

    pub fn a_b_stride(&self) -> usize {
        self.n_d * self.n_r * self.n_pk
    }

    pub fn index(&self, x: &DeviceState) -> Result<usize> {
        if !device_state_in_range(self.variant, &self.params, x) {
            return Err(Error::StateOutOfRange(format!("{x:?}")));
        }
        Ok(((x.a_b as usize * self.n_d + x.a_d as usize) * self.n_r + x.a_r as usize) * self.n_pk + x.d as usize - 1)
    }

    pub fn state(&self, idx: usize) -> DeviceState {
        debug_assert!(idx < self.size);
        let d = (idx % self.n_pk) as u32 + 1;
        let rest = idx / self.n_pk;
        let a_r = (rest % self.n_r) as u32;
        let rest = rest / self.n_r;
        let a_d = (rest % self.n_d) as u32;
        let a_b = (rest / self.n_d) as u32;
        DeviceState { a_b, a_d, a_r, d }
    }

    pub fn states(&self) -> impl Iterator<Item = DeviceState> + '_ {
        (0..self.size).map(move |i| self.state(i))
    }

    /// Outcomes of `w` from state index `s`, or `None` if `w` is infeasible there.
    #[inline]
    pub fn outcomes(&self, s: usize, w: DeviceAction) -> Option<&[(u32, f64)]> {
        let slot = 3 * s + w as usize;
        let (lo, hi) = (self.offsets[slot] as usize, self.offsets[slot + 1] as usize);
        if lo == hi {
            None
        } else {
            Some(&self.entries[lo..hi])
        }
    }

    #[inline]
    pub fn is_feasible(&self, s: usize, w: DeviceAction) -> bool {
        let slot = 3 * s + w as usize;
        self.offsets[slot] != self.offsets[slot + 1]
    }

    pub fn transition(&self, x: &DeviceState, w: DeviceAction) -> Result<TransitionDistribution<DeviceState>> {
        device_transition_for(self.variant, &self.params, x, w)
    }

    /// All-fresh state used as RVIA reference and simulation start.
    pub fn reference_state(&self) -> DeviceState {
        DeviceState { a_b: 0, a_d: 0, a_r: 0, d: self.params.packets }
    }

    pub fn reference_index(&self) -> usize {
        self.index(&self.reference_state()).expect("reference state is in range")
    }

    #[inline]
    pub fn a_r_of(&self, idx: usize) -> u32 {
        ((idx / self.n_pk) % self.n_r) as u32
    }

    #[inline]
    pub fn a_d_of(&self, idx: usize) -> u32 {
        ((idx / (self.n_pk * self.n_r)) % self.n_d) as u32
    }

    /// Expected value of `values` after `w` from `s`.
    #[inline]
    pub fn expectation(&self, s: usize, w: DeviceAction, values: &[f64]) -> Option<f64> {
        self.outcomes(s, w).map(|o| o.iter().map(|&(y, p)| p * values[y as usize]).sum())
    }
}

/// Local index buffer sized for typical fleets without heap allocation.
pub type LocalIndex = SmallVec<[usize; 8]>;

/// The controlled Markov chain of the whole fleet.
///
/// Construction only builds per-device kernels, so models of fleets whose
/// joint space is astronomically large stay cheap; joint-space operations
/// check [`SystemModel::joint_state_count`] first.
#[derive(Debug, Clone)]
pub struct SystemModel {
    config: SystemConfig,
    devices: Vec<DeviceModel>,
    strides: Vec<usize>,
    joint_states: Option<usize>,
    actions: Vec<SystemAction>,
    action_lookup: HashMap<SystemAction, u32>,
    scheduled: Vec<SmallVec<[(usize, DeviceAction); 4]>>,
}

impl SystemModel {
    pub fn new(config: SystemConfig) -> Result<Self> {
        config.validate()?;
        let k = config.k();
        let count = feasible_action_count(k, config.m).unwrap_or(u128::MAX);
        if count > MAX_SYSTEM_ACTIONS as u128 {
            return Err(Error::BudgetExceeded(format!(
                "{count} joint actions for K = {k}, M = {} (limit {MAX_SYSTEM_ACTIONS})",
                config.m
            )));
        }
        let devices =
            config.devices.iter().map(|p| DeviceModel::new(p.clone(), config.variant)).collect::<Result<Vec<_>>>()?;
        let mut strides = Vec::with_capacity(k);
        let mut acc: Option<usize> = Some(1);
        for d in &devices {
            strides.push(acc.unwrap_or(usize::MAX));
            acc = acc.and_then(|a| a.checked_mul(d.size()));
        }
        let actions = feasible_system_actions(k, config.m);
        let action_lookup = actions.iter().enumerate().map(|(i, a)| (a.clone(), i as u32)).collect();
        let scheduled = actions
            .iter()
            .map(|a| a.0.iter().enumerate().filter(|(_, w)| w.is_scheduled()).map(|(k, &w)| (k, w)).collect())
            .collect();
        Ok(SystemModel { config, devices, strides, joint_states: acc, actions, action_lookup, scheduled })
    }

    /// Single-device model, handy for per-device tables.
    pub fn single(params: DeviceParams, variant: ModelVariant) -> Result<Self> {
        Self::new(SystemConfig::new(vec![params], 1, variant)?)
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.devices.len()
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn device(&self, k: usize) -> &DeviceModel {
        &self.devices[k]
    }

    pub fn devices(&self) -> &[DeviceModel] {
        &self.devices
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn joint_state_count(&self) -> Option<usize> {
        self.joint_states
    }

    /// Joint state count, or `BudgetExceeded` if it is above `budget`.
    pub fn require_joint_states(&self, budget: usize) -> Result<usize> {
        match self.joint_states {
            Some(n) if n <= budget => Ok(n),
            Some(n) => Err(Error::BudgetExceeded(format!("{n} joint states exceed the budget of {budget}"))),
            None => Err(Error::BudgetExceeded("joint state count overflows".into())),
        }
    }

    /// Joint actions in canonical order.
    pub fn actions(&self) -> &[SystemAction] {
        &self.actions
    }

    pub fn action_index(&self, w: &SystemAction) -> Option<usize> {
        self.action_lookup.get(w).map(|&i| i as usize)
    }

    /// Non-idle `(device, action)` entries of action `i`.
    pub fn scheduled_entries(&self, i: usize) -> &[(usize, DeviceAction)] {
        &self.scheduled[i]
    }

    pub fn encode(&self, x: &SystemState) -> Result<usize> {
        if x.devices.len() != self.k() {
            return Err(Error::StateOutOfRange(format!(
                "state has {} devices, model has {}",
                x.devices.len(),
                self.k()
            )));
        }
        if self.joint_states.is_none() {
            return Err(Error::BudgetExceeded("joint index does not fit in usize".into()));
        }
        let mut idx = 0;
        for (k, s) in x.devices.iter().enumerate() {
            idx += self.devices[k].index(s)? * self.strides[k];
        }
        Ok(idx)
    }

    pub fn decode(&self, idx: usize) -> SystemState {
        let mut devices = Vec::with_capacity(self.k());
        let mut rest = idx;
        for d in &self.devices {
            devices.push(d.state(rest % d.size()));
            rest /= d.size();
        }
        SystemState { devices }
    }

    /// Splits a joint index into per-device indices.
    pub fn split_index(&self, idx: usize) -> LocalIndex {
        let mut out = LocalIndex::with_capacity(self.k());
        let mut rest = idx;
        for d in &self.devices {
            out.push(rest % d.size());
            rest /= d.size();
        }
        out
    }

    pub fn join_index(&self, local: &[usize]) -> usize {
        local.iter().zip(&self.strides).map(|(l, s)| l * s).sum()
    }

    pub fn local_of(&self, x: &SystemState) -> Result<LocalIndex> {
        if x.devices.len() != self.k() {
            return Err(Error::StateOutOfRange("device count mismatch".into()));
        }
        x.devices.iter().zip(&self.devices).map(|(s, d)| d.index(s)).collect()
    }

    pub fn reference_state(&self) -> SystemState {
        SystemState { devices: self.devices.iter().map(|d| d.reference_state()).collect() }
    }

    pub fn reference_local(&self) -> LocalIndex {
        self.devices.iter().map(|d| d.reference_index()).collect()
    }

    pub fn stage_cost(&self, x: &SystemState) -> f64 {
        stage_cost(x)
    }

    #[inline]
    pub fn stage_cost_local(&self, local: &[usize]) -> f64 {
        local.iter().zip(&self.devices).map(|(&s, d)| d.a_r_of(s) as f64).sum()
    }

    #[inline]
    pub fn is_feasible_local(&self, local: &[usize], w: &SystemAction) -> bool {
        w.scheduled_count() <= self.m()
            && w.0.iter().zip(local).zip(&self.devices).all(|((&a, &s), d)| d.is_feasible(s, a))
    }

    /// Expected value of a joint table after `w`, `None` if `w` is infeasible.
    #[inline]
    pub fn expected_value(&self, local: &[usize], w: &SystemAction, values: &[f64]) -> Option<f64> {
        let mut lists: SmallVec<[&[(u32, f64)]; 8]> = SmallVec::with_capacity(self.k());
        for ((&a, &s), d) in w.0.iter().zip(local).zip(&self.devices) {
            lists.push(d.outcomes(s, a)?);
        }
        Some(expect_rec(&lists, &self.strides, 0, 0, values))
    }

    /// Calls `f(successor_index, probability)` for every joint successor.
    /// Returns false without calling `f` if `w` is infeasible.
    pub fn for_each_successor(&self, local: &[usize], w: &SystemAction, mut f: impl FnMut(usize, f64)) -> bool {
        let mut lists: SmallVec<[&[(u32, f64)]; 8]> = SmallVec::with_capacity(self.k());
        for ((&a, &s), d) in w.0.iter().zip(local).zip(&self.devices) {
            match d.outcomes(s, a) {
                Some(o) => lists.push(o),
                None => return false,
            }
        }
        successors_rec(&lists, &self.strides, 0, 0, 1.0, &mut f);
        true
    }

    /// Product distribution over the per-device kernels.
    pub fn system_transition(&self, x: &SystemState, w: &SystemAction) -> Result<TransitionDistribution<SystemState>> {
        if w.0.len() != self.k() {
            return Err(Error::InfeasibleAction(format!("action {w} has the wrong device count")));
        }
        if w.scheduled_count() > self.m() {
            return Err(Error::InfeasibleAction(format!(
                "{w} schedules {} devices, M = {}",
                w.scheduled_count(),
                self.m()
            )));
        }
        let mut joint: Vec<(Vec<DeviceState>, f64)> = vec![(Vec::with_capacity(self.k()), 1.0)];
        for (k, (s, &a)) in x.devices.iter().zip(&w.0).enumerate() {
            let dist = self.devices[k].transition(s, a)?;
            let mut next = Vec::with_capacity(joint.len() * dist.len());
            for (prefix, p) in &joint {
                for (y, q) in &dist.entries {
                    let mut v = prefix.clone();
                    v.push(*y);
                    next.push((v, p * q));
                }
            }
            joint = next;
        }
        Ok(TransitionDistribution {
            entries: joint.into_iter().map(|(d, p)| (SystemState { devices: d }, p)).collect(),
        })
    }
}

fn expect_rec(lists: &[&[(u32, f64)]], strides: &[usize], k: usize, base: usize, values: &[f64]) -> f64 {
    if k == lists.len() {
        return values[base];
    }
    let mut acc = 0.0;
    for &(y, p) in lists[k] {
        acc += p * expect_rec(lists, strides, k + 1, base + y as usize * strides[k], values);
    }
    acc
}

fn successors_rec(
    lists: &[&[(u32, f64)]],
    strides: &[usize],
    k: usize,
    base: usize,
    prob: f64,
    f: &mut impl FnMut(usize, f64),
) {
    if k == lists.len() {
        f(base, prob);
        return;
    }
    for &(y, p) in lists[k] {
        successors_rec(lists, strides, k + 1, base + y as usize * strides[k], prob * p, f);
    }
}

/// Sum of receiver AoI over all devices.
pub fn stage_cost(x: &SystemState) -> f64 {
    x.devices.iter().map(|d| d.a_r as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaw(l: u32, lambda: f64, cap: u32) -> DeviceParams {
        DeviceParams::uniform(l, lambda, cap)
    }

    fn dist(entries: &[((u32, u32, u32), f64)]) -> Vec<(DeviceState, f64)> {
        entries.iter().map(|&((a, r, d), p)| (DeviceState::new(a, r, d), p)).collect()
    }

    fn assert_dist(got: &TransitionDistribution<DeviceState>, want: &[(DeviceState, f64)]) {
        assert_eq!(got.len(), want.len(), "got {got:?}");
        for (s, p) in want {
            assert!((got.prob_of(s) - p).abs() < 1e-12, "{s:?}: {} vs {p}", got.prob_of(s));
        }
    }

    #[test]
    fn state_space_cardinalities() {
        let p = gaw(4, 0.8, 10);
        assert_eq!(enumerate_device_states(&p, ModelVariant::GenerateAtWill).len(), 484);
        let ra = p.clone().with_arrivals(0.5, 10);
        assert_eq!(enumerate_device_states(&ra, ModelVariant::RandomArrival).len(), 5324);
        let gt = p.with_generation_time(2);
        assert_eq!(enumerate_device_states(&gt, ModelVariant::NonZeroGenerationTime).len(), 605);
    }

    #[test]
    fn enumeration_order_matches_index() {
        let p = gaw(3, 0.5, 2).with_arrivals(0.3, 2);
        let m = DeviceModel::new(p.clone(), ModelVariant::RandomArrival).unwrap();
        for (i, s) in enumerate_device_states(&p, ModelVariant::RandomArrival).iter().enumerate() {
            assert_eq!(m.index(s).unwrap(), i);
            assert_eq!(m.state(i), *s);
        }
    }

    #[test]
    fn action_sets() {
        use DeviceAction::*;
        let a = feasible_system_actions(2, 1);
        let want: Vec<SystemAction> = [[Idle, Idle], [Continue, Idle], [Fresh, Idle], [Idle, Continue], [Idle, Fresh]]
            .iter()
            .map(|w| SystemAction(w.to_vec()))
            .collect();
        assert_eq!(a, want);
        assert_eq!(feasible_system_actions(2, 2).len(), 9);
        assert_eq!(feasible_system_actions(1, 1).len(), 3);
        assert_eq!(feasible_system_actions(3, 0), vec![SystemAction::idle(3)]);
        for (k, m) in [(4, 2), (5, 3), (3, 3)] {
            assert_eq!(feasible_system_actions(k, m).len() as u128, feasible_action_count(k, m).unwrap());
        }
    }

    #[test]
    fn generate_at_will_examples() {
        let p = gaw(4, 0.8, 10);
        let d = device_transition(&DeviceState::new(2, 5, 3), DeviceAction::Continue, &p).unwrap();
        assert_dist(&d, &dist(&[((3, 6, 2), 0.8), ((3, 6, 3), 0.2)]));
        let d = device_transition(&DeviceState::new(4, 7, 1), DeviceAction::Continue, &p).unwrap();
        assert_dist(&d, &dist(&[((0, 5, 4), 0.8), ((5, 8, 1), 0.2)]));
        let d = device_transition(&DeviceState::new(3, 5, 2), DeviceAction::Fresh, &p).unwrap();
        assert_dist(&d, &dist(&[((1, 6, 3), 0.8), ((0, 6, 4), 0.2)]));
        let d = device_transition(&DeviceState::new(10, 10, 2), DeviceAction::Idle, &p).unwrap();
        assert_dist(&d, &dist(&[((10, 10, 2), 1.0)]));
    }

    #[test]
    fn generate_at_will_rejects_out_of_range() {
        let p = gaw(4, 0.8, 10);
        for x in [DeviceState::new(11, 0, 1), DeviceState::new(0, 0, 0), DeviceState::new(0, 0, 5)] {
            assert!(matches!(device_transition(&x, DeviceAction::Idle, &p), Err(Error::StateOutOfRange(_))));
        }
    }

    #[test]
    fn random_arrival_examples() {
        let p = gaw(4, 0.8, 10).with_arrivals(0.5, 10);
        let b = DeviceState::with_buffer;
        let d = device_transition_random_arrival(&b(3, 2, 5, 2), DeviceAction::Continue, &p).unwrap();
        assert_dist(&d, &[(b(1, 3, 6, 1), 0.4), (b(1, 3, 6, 2), 0.1), (b(4, 3, 6, 1), 0.4), (b(4, 3, 6, 2), 0.1)]);
        let d = device_transition_random_arrival(&b(3, 6, 8, 2), DeviceAction::Fresh, &p).unwrap();
        assert_dist(&d, &[(b(1, 1, 9, 3), 0.4), (b(1, 1, 9, 4), 0.1), (b(4, 4, 9, 3), 0.4), (b(4, 4, 9, 4), 0.1)]);
        let d = device_transition_random_arrival(&b(3, 2, 5, 2), DeviceAction::Idle, &p).unwrap();
        assert_dist(&d, &[(b(1, 3, 6, 2), 0.5), (b(4, 3, 6, 2), 0.5)]);
        // Delivery hands the buffered update to the device.
        let d = device_transition_random_arrival(&b(3, 2, 5, 1), DeviceAction::Continue, &p).unwrap();
        assert_dist(&d, &[(b(1, 1, 3, 4), 0.4), (b(1, 3, 6, 1), 0.1), (b(4, 4, 3, 4), 0.4), (b(4, 3, 6, 1), 0.1)]);
    }

    #[test]
    fn random_arrival_fresh_needs_buffer() {
        let p = gaw(4, 0.8, 10).with_arrivals(0.5, 10);
        let x = DeviceState::with_buffer(0, 2, 5, 2);
        assert!(matches!(
            device_transition_random_arrival(&x, DeviceAction::Fresh, &p),
            Err(Error::InfeasibleAction(_))
        ));
        assert!(device_transition_random_arrival(&x, DeviceAction::Continue, &p).is_ok());
    }

    #[test]
    fn generation_time_examples() {
        let p = gaw(2, 0.8, 10).with_generation_time(2);
        let d = device_transition_gen_time(&DeviceState::new(5, 7, 2), DeviceAction::Fresh, &p).unwrap();
        assert_dist(&d, &dist(&[((0, 8, 3), 1.0)]));
        let d = device_transition_gen_time(&DeviceState::new(0, 7, 3), DeviceAction::Idle, &p).unwrap();
        assert_dist(&d, &dist(&[((1, 8, 2), 1.0)]));
        let p1 = gaw(2, 1.0, 10).with_generation_time(2);
        let d = device_transition_gen_time(&DeviceState::new(2, 6, 1), DeviceAction::Continue, &p1).unwrap();
        assert_dist(&d, &dist(&[((0, 3, 3), 1.0)]));
        for w in [DeviceAction::Continue, DeviceAction::Fresh] {
            assert!(matches!(
                device_transition_gen_time(&DeviceState::new(0, 7, 3), w, &p),
                Err(Error::InfeasibleAction(_))
            ));
        }
    }

    #[test]
    fn variant_requirements() {
        assert!(gaw(4, 0.8, 10).validate(ModelVariant::RandomArrival).is_err());
        assert!(gaw(4, 0.8, 10).validate(ModelVariant::NonZeroGenerationTime).is_err());
        assert!(gaw(1, 0.8, 10).validate(ModelVariant::GenerateAtWill).is_err());
        assert!(gaw(4, 0.0, 10).validate(ModelVariant::GenerateAtWill).is_err());
        assert!(gaw(4, 0.8, 10).with_generation_time(0).validate(ModelVariant::NonZeroGenerationTime).is_err());
        assert!(SystemConfig::new(vec![gaw(2, 0.5, 3)], 2, ModelVariant::GenerateAtWill).is_err());
        assert!(SystemConfig::new(vec![gaw(2, 0.5, 3)], 0, ModelVariant::GenerateAtWill).is_ok());
    }

    fn two_device_model(l1: f64, l2: f64) -> SystemModel {
        let cfg = SystemConfig::new(vec![gaw(4, l1, 10), gaw(4, l2, 10)], 2, ModelVariant::GenerateAtWill).unwrap();
        SystemModel::new(cfg).unwrap()
    }

    #[test]
    fn system_transition_products() {
        use DeviceAction::*;
        let m = two_device_model(0.5, 0.5);
        let x = SystemState::new(vec![DeviceState::new(2, 5, 3), DeviceState::new(1, 4, 2)]);
        let d = m.system_transition(&x, &SystemAction(vec![Continue, Continue])).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.entries.iter().all(|(_, p)| (p - 0.25).abs() < 1e-15));

        let m = two_device_model(0.5, 0.7);
        let d = m.system_transition(&x, &SystemAction(vec![Idle, Continue])).unwrap();
        let mut probs: Vec<f64> = d.entries.iter().map(|e| e.1).collect();
        probs.sort_by(f64::total_cmp);
        assert!((probs[0] - 0.3).abs() < 1e-12 && (probs[1] - 0.7).abs() < 1e-12);

        let single = SystemModel::single(gaw(4, 0.8, 10), ModelVariant::GenerateAtWill).unwrap();
        let xs = SystemState::new(vec![DeviceState::new(2, 5, 3)]);
        let joint = single.system_transition(&xs, &SystemAction(vec![Continue])).unwrap();
        let dev = single.device(0).transition(&xs.devices[0], Continue).unwrap();
        assert_eq!(joint.len(), dev.len());
        for (s, p) in &dev.entries {
            assert_eq!(joint.prob_of(&SystemState::new(vec![*s])), *p);
        }
    }

    #[test]
    fn system_transition_respects_m() {
        use DeviceAction::*;
        let cfg = SystemConfig::new(vec![gaw(4, 0.5, 10), gaw(4, 0.5, 10)], 1, ModelVariant::GenerateAtWill).unwrap();
        let m = SystemModel::new(cfg).unwrap();
        let x = m.reference_state();
        assert!(matches!(
            m.system_transition(&x, &SystemAction(vec![Continue, Fresh])),
            Err(Error::InfeasibleAction(_))
        ));
    }

    #[test]
    fn stage_costs() {
        let s = |rs: &[u32]| SystemState::new(rs.iter().map(|&r| DeviceState::new(0, r, 1)).collect());
        assert_eq!(stage_cost(&s(&[0, 0])), 0.0);
        assert_eq!(stage_cost(&s(&[5, 5])), 10.0);
        assert_eq!(stage_cost(&s(&[10])), 10.0);
    }

    #[test]
    fn joint_index_is_monotone_in_ages() {
        let m = two_device_model(0.5, 0.5);
        let x = SystemState::new(vec![DeviceState::new(2, 5, 3), DeviceState::new(1, 4, 2)]);
        let base = m.encode(&x).unwrap();
        for k in 0..2 {
            let mut y = x.clone();
            y.devices[k].a_d += 1;
            assert_eq!(m.encode(&y).unwrap(), base + m.strides()[k] * m.device(k).a_d_stride());
        }
    }
}

use crate::controllers::{sgn, ControllerParams, OptimalAgentParams, PracticalAgentParams};
use crate::error::{Error, Result};
use crate::ipa;
use crate::model::{simpson_panel, Scenario, ZERO_BOUNDARY_TOL};

use super::{
    Event, EventKind, Sample, SegmentContribution, SensitivityOutput, SensitivityState, SimOptions, SimOutput,
};

/// What drives the agents.
#[derive(Debug, Clone, Copy)]
pub enum Law<'a> {
    Params(&'a ControllerParams),
    Playback { cell: f64, values: &'a [Vec<f64>] },
}

/// Guard values above `-DETECT_TOL` at a step end do not count as crossed;
/// keeps guards that ride along zero (exact tracking, unit-speed targets)
/// from chattering on roundoff.
const DETECT_TOL: f64 = 1e-12;
/// Reclassification dead band after an event.
const BAND: f64 = 1e-12;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Bang { phase: usize, dir: f64 },
    Track { phase: usize, sat: f64 },
    Pi { phase: usize, active: bool, sat: f64 },
    Playback { cell: usize },
}

/// Everything held constant over one inter-event segment.
#[derive(Debug, Clone, PartialEq)]
struct Frozen {
    modes: Vec<Mode>,
    /// Indexed `i * n + j`.
    inside: Vec<bool>,
    side: Vec<f64>,
    in_z: Vec<bool>,
    pos_noise: Vec<f64>,
    vel_noise: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Guard {
    Sense { i: usize, j: usize },
    Align { i: usize, j: usize },
    RZero { i: usize },
    ZExit { i: usize },
    Sat { j: usize },
    Activate { j: usize },
}

impl Guard {
    fn detect_tol(&self) -> f64 {
        match self {
            Guard::RZero { .. } => 0.0,
            _ => DETECT_TOL,
        }
    }
}

/// Offsets into the flat state `[s, I, R, s′, I′, R′]`.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    m: usize,
    d: usize,
    offsets: Vec<usize>,
    sens: bool,
}

impl Layout {
    fn s(&self, j: usize) -> usize {
        j
    }
    fn integ(&self, j: usize) -> usize {
        self.n + j
    }
    fn r(&self, i: usize) -> usize {
        2 * self.n + i
    }
    fn primal_len(&self) -> usize {
        2 * self.n + self.m
    }
    fn sp(&self, j: usize) -> std::ops::Range<usize> {
        let base = self.primal_len();
        base + self.offsets[j]..base + self.offsets[j + 1]
    }
    fn ip(&self, j: usize) -> std::ops::Range<usize> {
        let base = self.primal_len() + self.d;
        base + self.offsets[j]..base + self.offsets[j + 1]
    }
    fn rp(&self, i: usize) -> std::ops::Range<usize> {
        let base = self.primal_len() + 2 * self.d;
        base + i * self.d..base + (i + 1) * self.d
    }
    fn total(&self) -> usize {
        if self.sens {
            self.primal_len() + 2 * self.d + self.m * self.d
        } else {
            self.primal_len()
        }
    }
}

struct Engine<'a> {
    sc: &'a Scenario,
    law: Law<'a>,
    opts: &'a SimOptions,
    lay: Layout,
    horizon: f64,
    h: f64,
    th: Vec<f64>,
    thd: Vec<f64>,
    u: Vec<f64>,
    p: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    guards: Vec<(Guard, f64, f64)>,
    noise: Vec<Vec<f64>>,
    breakpoints: Vec<(f64, usize)>,
    bp_next: usize,
    sample_period: Option<f64>,
    sample_next: usize,
    switch: Vec<Option<f64>>,
    last_tau: Vec<Vec<f64>>,
    practical_ends: Vec<Vec<f64>>,
    events: Vec<Event>,
    tau_prime: Vec<Option<Vec<f64>>>,
    agent_sensed: Vec<bool>,
    last_mid: f64,
}

pub(super) fn run(scenario: &Scenario, law: Law<'_>, options: &SimOptions) -> Result<SimOutput> {
    Engine::new(scenario, law, options).run()
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, law: Law<'a>, opts: &'a SimOptions) -> Self {
        let n = sc.num_agents();
        let m = sc.num_targets();
        let horizon = sc.horizon;
        let (offsets, sens) = match law {
            Law::Params(p) => (p.block_offsets(), opts.sensitivities),
            Law::Playback { .. } => (vec![0; n + 1], false),
        };
        let d = offsets[n];
        let lay = Layout {
            n,
            m,
            d,
            offsets,
            sens,
        };
        let total = lay.total();
        let mut breakpoints: Vec<(f64, usize)> = sc
            .targets
            .iter()
            .enumerate()
            .flat_map(|(i, tg)| {
                tg.trajectory
                    .breakpoints(horizon)
                    .into_iter()
                    .map(move |t| (t, i))
            })
            .collect();
        breakpoints.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (sample_period, noise) = match law {
            Law::Playback { cell, .. } => (Some(cell), Vec::new()),
            Law::Params(_) => match &opts.noise {
                Some(nm) => (Some(nm.sample_interval), nm.draws(m, horizon)),
                None => (None, Vec::new()),
            },
        };
        let practical_ends = match law {
            Law::Params(ControllerParams::Practical(agents)) => {
                agents.iter().map(|a| a.period_ends(horizon)).collect()
            }
            _ => vec![Vec::new(); n],
        };
        let last_tau = (0..n)
            .map(|j| vec![0.0; lay.offsets[j + 1] - lay.offsets[j]])
            .collect();
        Engine {
            sc,
            law,
            opts,
            horizon,
            h: opts.step_for(horizon),
            th: vec![0.0; m],
            thd: vec![0.0; m],
            u: vec![0.0; n],
            p: vec![0.0; m * n],
            k2: vec![0.0; total],
            k3: vec![0.0; total],
            k4: vec![0.0; total],
            tmp: vec![0.0; total],
            guards: Vec::new(),
            noise,
            breakpoints,
            bp_next: 0,
            sample_period,
            sample_next: 1,
            switch: vec![None; n],
            last_tau,
            practical_ends,
            events: Vec::new(),
            tau_prime: Vec::new(),
            agent_sensed: vec![false; n],
            last_mid: 0.0,
            lay,
        }
    }

    fn optimal(&self, j: usize) -> &'a OptimalAgentParams {
        match self.law {
            Law::Params(ControllerParams::Optimal(a)) => &a[j],
            _ => unreachable!("optimal parameters requested for a different law"),
        }
    }

    fn practical(&self, j: usize) -> &'a PracticalAgentParams {
        match self.law {
            Law::Params(ControllerParams::Practical(a)) => &a[j],
            _ => unreachable!("practical parameters requested for a different law"),
        }
    }

    fn params(&self) -> Option<&'a ControllerParams> {
        match self.law {
            Law::Params(p) => Some(p),
            Law::Playback { .. } => None,
        }
    }

    fn kin(&mut self, t: f64, t_ref: f64) {
        for (i, tg) in self.sc.targets.iter().enumerate() {
            let (x, v) = tg.trajectory.kinematics(t, t_ref);
            self.th[i] = x;
            self.thd[i] = v;
        }
    }

    /// Measured tracking velocity `αᵀϑ̇̂` of a tracking agent.
    fn track_velocity(&self, j: usize, phase: usize, fz: &Frozen) -> f64 {
        let w = self.optimal(j).combinations[phase].weights();
        (0..self.lay.m)
            .map(|i| w[i] * (self.thd[i] + fz.vel_noise[i]))
            .sum()
    }

    /// Tracking error `αᵀϑ̂ − s` of a PI agent.
    fn pi_error(&self, j: usize, phase: usize, x: &[f64], fz: &Frozen) -> f64 {
        let w = self.practical(j).combinations[phase].weights();
        let reference: f64 = (0..self.lay.m)
            .map(|i| w[i] * (self.th[i] + fz.pos_noise[i]))
            .sum();
        reference - x[self.lay.s(j)]
    }

    fn pi_raw(&self, j: usize, phase: usize, active: bool, x: &[f64], fz: &Frozen) -> f64 {
        let p = self.practical(j);
        let e = self.pi_error(j, phase, x, fz);
        let integral = if active { x[self.lay.integ(j)] } else { 0.0 };
        p.gain_p * e + p.gain_i * integral
    }

    /// Control of agent `j` under a frozen mode; needs `kin` first.
    fn control(&self, j: usize, mode: Mode, x: &[f64], fz: &Frozen) -> f64 {
        match mode {
            Mode::Bang { dir, .. } => dir,
            Mode::Track { phase, sat } => {
                if sat != 0.0 {
                    sat
                } else {
                    self.track_velocity(j, phase, fz)
                }
            }
            Mode::Pi { phase, active, sat } => {
                if sat != 0.0 {
                    sat
                } else {
                    self.pi_raw(j, phase, active, x, fz)
                }
            }
            Mode::Playback { cell } => match self.law {
                Law::Playback { values, .. } => {
                    let row = &values[j];
                    row.get(cell).or(row.last()).copied().unwrap_or(0.0)
                }
                Law::Params(_) => unreachable!(),
            },
        }
    }

    /// Saturated control value regardless of the frozen saturation flag.
    fn natural_control(&self, j: usize, mode: Mode, x: &[f64], fz: &Frozen) -> f64 {
        let free = match mode {
            Mode::Track { phase, .. } => self.track_velocity(j, phase, fz),
            Mode::Pi { phase, active, .. } => self.pi_raw(j, phase, active, x, fz),
            other => self.control(j, other, x, fz),
        };
        free.clamp(-1.0, 1.0)
    }

    /// Fills `self.u` and `self.p` for the state `x`; needs `kin` first.
    fn controls_and_coverage(&mut self, x: &[f64], fz: &Frozen) {
        let (n, m) = (self.lay.n, self.lay.m);
        for j in 0..n {
            self.u[j] = self.control(j, fz.modes[j], x, fz);
        }
        for i in 0..m {
            for j in 0..n {
                let k = i * n + j;
                self.p[k] = if fz.inside[k] {
                    let r = self.sc.agents[j].sensing_range;
                    1.0 - fz.side[k] * (self.th[i] - x[self.lay.s(j)]) / r
                } else {
                    0.0
                };
            }
        }
    }

    fn coverage(&self, i: usize) -> f64 {
        let n = self.lay.n;
        1.0 - (0..n).map(|j| 1.0 - self.p[i * n + j]).product::<f64>()
    }

    fn uncovered_except(&self, i: usize, j: usize) -> f64 {
        let n = self.lay.n;
        (0..n)
            .filter(|&l| l != j)
            .map(|l| 1.0 - self.p[i * n + l])
            .product()
    }

    /// Time derivative of the full state under frozen modes.
    fn rhs(&mut self, t: f64, t_ref: f64, x: &[f64], fz: &Frozen, out: &mut [f64], sens: bool) {
        self.kin(t, t_ref);
        self.controls_and_coverage(x, fz);
        let lay = &self.lay;
        let (n, m) = (lay.n, lay.m);
        for j in 0..n {
            out[lay.s(j)] = self.u[j];
            out[lay.integ(j)] = match fz.modes[j] {
                Mode::Pi {
                    phase, active: true, ..
                } => self.pi_error(j, phase, x, fz),
                _ => 0.0,
            };
        }
        for i in 0..m {
            out[lay.r(i)] = if fz.in_z[i] {
                0.0
            } else {
                let tg = &self.sc.targets[i];
                tg.growth_rate - tg.reduction_rate * self.coverage(i)
            };
        }
        if !sens {
            return;
        }
        let params = self.params().expect("sensitivities need parameters");
        for j in 0..n {
            let spr = lay.sp(j);
            let ipr = lay.ip(j);
            for k in spr.clone() {
                out[k] = 0.0;
            }
            for k in ipr.clone() {
                out[k] = 0.0;
            }
            match fz.modes[j] {
                Mode::Track { phase, sat } if sat == 0.0 => {
                    for i in 0..m {
                        let idx = spr.start + params.local_weight_index(phase, i, m);
                        out[idx] = self.thd[i] + fz.vel_noise[i];
                    }
                }
                Mode::Pi { phase, active, sat } => {
                    let pa = self.practical(j);
                    if sat == 0.0 {
                        for (o, k) in spr.clone().enumerate() {
                            let mut v = -pa.gain_p * x[k];
                            if active {
                                v += pa.gain_i * x[ipr.start + o];
                            }
                            out[k] = v;
                        }
                    }
                    if active {
                        for (o, k) in ipr.clone().enumerate() {
                            out[k] = -x[spr.start + o];
                        }
                    }
                    for i in 0..m {
                        let local = params.local_weight_index(phase, i, m);
                        let meas = self.th[i] + fz.pos_noise[i];
                        if sat == 0.0 {
                            out[spr.start + local] += pa.gain_p * meas;
                        }
                        if active {
                            out[ipr.start + local] += meas;
                        }
                    }
                }
                _ => {}
            }
        }
        for i in 0..m {
            let row = lay.rp(i);
            for k in row.clone() {
                out[k] = 0.0;
            }
            if fz.in_z[i] {
                continue;
            }
            let b = self.sc.targets[i].reduction_rate;
            for j in 0..n {
                if !fz.inside[i * n + j] {
                    continue;
                }
                let r = self.sc.agents[j].sensing_range;
                let c = -b * fz.side[i * n + j] / r * self.uncovered_except(i, j);
                let spr = lay.sp(j);
                let off = lay.offsets[j];
                for (o, k) in spr.enumerate() {
                    out[row.start + off + o] += c * x[k];
                }
            }
        }
    }

    /// One RK4 step from `(t0, x0)` to `t1` with first stage `k1`.
    fn rk4(&mut self, t0: f64, t1: f64, x0: &[f64], k1: &[f64], fz: &Frozen, out: &mut [f64], sens: bool) {
        let len = if sens {
            self.lay.total()
        } else {
            self.lay.primal_len()
        };
        let h = t1 - t0;
        let tm = t0 + 0.5 * h;
        let mut tmp = std::mem::take(&mut self.tmp);
        let mut k2 = std::mem::take(&mut self.k2);
        let mut k3 = std::mem::take(&mut self.k3);
        let mut k4 = std::mem::take(&mut self.k4);
        for k in 0..len {
            tmp[k] = x0[k] + 0.5 * h * k1[k];
        }
        self.rhs(tm, tm, &tmp[..len], fz, &mut k2[..len], sens);
        for k in 0..len {
            tmp[k] = x0[k] + 0.5 * h * k2[k];
        }
        self.rhs(tm, tm, &tmp[..len], fz, &mut k3[..len], sens);
        for k in 0..len {
            tmp[k] = x0[k] + h * k3[k];
        }
        self.rhs(t1, tm, &tmp[..len], fz, &mut k4[..len], sens);
        for k in 0..len {
            out[k] = x0[k] + h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
        self.tmp = tmp;
        self.k2 = k2;
        self.k3 = k3;
        self.k4 = k4;
    }

    /// Guard values (and rates where available) at `(t, x)` into `self.guards`.
    fn eval_guards(&mut self, t: f64, t_ref: f64, x: &[f64], fz: &Frozen) {
        self.kin(t, t_ref);
        self.controls_and_coverage(x, fz);
        let (n, m) = (self.lay.n, self.lay.m);
        let mut list = std::mem::take(&mut self.guards);
        list.clear();
        for i in 0..m {
            for j in 0..n {
                let k = i * n + j;
                let r = self.sc.agents[j].sensing_range;
                let d = self.th[i] - x[self.lay.s(j)];
                let dist_rate = sgn(d) * (self.thd[i] - self.u[j]);
                if fz.inside[k] {
                    list.push((Guard::Sense { i, j }, r - d.abs(), -dist_rate));
                    list.push((Guard::Align { i, j }, fz.side[k] * d, f64::NAN));
                } else {
                    list.push((Guard::Sense { i, j }, d.abs() - r, dist_rate));
                }
            }
        }
        for i in 0..m {
            let tg = &self.sc.targets[i];
            let cov = self.coverage(i);
            if fz.in_z[i] {
                let mut cov_rate = 0.0;
                for j in 0..n {
                    let k = i * n + j;
                    if fz.inside[k] {
                        let r = self.sc.agents[j].sensing_range;
                        let pdot = -fz.side[k] * (self.thd[i] - self.u[j]) / r;
                        cov_rate += self.uncovered_except(i, j) * pdot;
                    }
                }
                list.push((
                    Guard::ZExit { i },
                    tg.reduction_rate * cov - tg.growth_rate,
                    tg.reduction_rate * cov_rate,
                ));
            } else {
                list.push((
                    Guard::RZero { i },
                    x[self.lay.r(i)],
                    tg.growth_rate - tg.reduction_rate * cov,
                ));
            }
        }
        for j in 0..n {
            match fz.modes[j] {
                Mode::Track { phase, sat } => {
                    let v = self.track_velocity(j, phase, fz);
                    let g = if sat == 0.0 { 1.0 - v.abs() } else { sat * v - 1.0 };
                    list.push((Guard::Sat { j }, g, f64::NAN));
                }
                Mode::Pi { phase, active, sat } => {
                    let raw = self.pi_raw(j, phase, active, x, fz);
                    let g = if sat == 0.0 {
                        1.0 - raw.abs()
                    } else {
                        sat * raw - 1.0
                    };
                    list.push((Guard::Sat { j }, g, f64::NAN));
                    if !active {
                        let pa = self.practical(j);
                        let e = self.pi_error(j, phase, x, fz);
                        let w = pa.combinations[phase].weights();
                        let edot: f64 = (0..m).map(|i| w[i] * self.thd[i]).sum::<f64>() - self.u[j];
                        list.push((
                            Guard::Activate { j },
                            (pa.gain_p * e).abs() - pa.switch_tolerance,
                            pa.gain_p * sgn(e) * edot,
                        ));
                    }
                }
                _ => {}
            }
        }
        self.guards = list;
    }

    /// Primal state at `t1` reached by a single RK4 step from `(t0, x0)`.
    fn partial(&mut self, t0: f64, t1: f64, x0: &[f64], k1: &[f64], fz: &Frozen) -> Vec<f64> {
        let mut out = vec![0.0; self.lay.total()];
        self.rk4(t0, t1, x0, k1, fz, &mut out, false);
        out
    }

    fn guard_at(&mut self, idx: usize, t0: f64, t1: f64, x0: &[f64], k1: &[f64], fz: &Frozen) -> (f64, f64) {
        let xs = self.partial(t0, t1, x0, k1, fz);
        self.eval_guards(t1, t0 + 0.5 * (t1 - t0), &xs, fz);
        let (_, g, r) = self.guards[idx];
        (g, r)
    }

    /// Earliest time in `(t0, hi]` where guard `idx` is negative, given
    /// that it is negative at `hi`.
    fn localize(&mut self, idx: usize, t0: f64, hi: f64, x0: &[f64], k1: &[f64], fz: &Frozen) -> f64 {
        let (mut lo, mut hi) = (t0, hi);
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let (g, _) = self.guard_at(idx, t0, mid, x0, k1, fz);
            if g < 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// Looks for a dip below zero between two nonnegative guard values whose
    /// rate changes sign from negative to positive.
    fn graze(
        &mut self,
        idx: usize,
        t0: f64,
        t1: f64,
        (g0, r0): (f64, f64),
        (g1, r1): (f64, f64),
        x0: &[f64],
        k1: &[f64],
        fz: &Frozen,
    ) -> Option<f64> {
        if !(r0 < 0.0 && r1 > 0.0) || g0 < 0.0 {
            return None;
        }
        let h = t1 - t0;
        let hermite_min = (0..=16)
            .map(|k| {
                let s = k as f64 / 16.0;
                let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
                let h10 = s.powi(3) - 2.0 * s * s + s;
                let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
                let h11 = s.powi(3) - s * s;
                h00 * g0 + h10 * h * r0 + h01 * g1 + h11 * h * r1
            })
            .fold(f64::INFINITY, f64::min);
        if hermite_min >= 0.5 * g0.min(g1) {
            return None;
        }
        let (mut lo, mut hi) = (t0, t1);
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let (_, r) = self.guard_at(idx, t0, mid, x0, k1, fz);
            if r < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (gm, _) = self.guard_at(idx, t0, hi, x0, k1, fz);
        if gm < -self.guards[idx].0.detect_tol() {
            Some(self.localize(idx, t0, hi, x0, k1, fz))
        } else {
            None
        }
    }
}

fn side_of(d: f64) -> f64 {
    if d < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl<'a> Engine<'a> {
    fn log(&mut self, time: f64, kind: EventKind, tau: Option<Vec<f64>>) -> Result<()> {
        if self.events.len() >= self.opts.max_events {
            return Err(Error::EventLimit {
                limit: self.opts.max_events,
                time,
            });
        }
        self.events.push(Event { time, kind });
        if self.lay.sens {
            self.tau_prime.push(tau);
        }
        Ok(())
    }

    fn globalize(&self, j: usize, local: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.lay.d];
        g[self.lay.offsets[j]..self.lay.offsets[j + 1]].copy_from_slice(local);
        g
    }

    fn apply_sample(&self, k: usize, fz: &mut Frozen) {
        match self.law {
            Law::Playback { .. } => {
                for mode in fz.modes.iter_mut() {
                    *mode = Mode::Playback { cell: k };
                }
            }
            Law::Params(_) => {
                if let (Some(nm), Some(row)) = (&self.opts.noise, self.noise.get(k)) {
                    for i in 0..self.lay.m {
                        fz.pos_noise[i] = nm.position_noise_scale * row[i];
                        fz.vel_noise[i] = nm.velocity_noise_scale * row[i];
                    }
                }
            }
        }
    }

    fn initial_frozen(&mut self, x: &[f64]) -> Frozen {
        let (n, m) = (self.lay.n, self.lay.m);
        let mut modes = Vec::with_capacity(n);
        for j in 0..n {
            let mode = match self.law {
                Law::Params(ControllerParams::Optimal(agents)) => {
                    let psi = agents[j].switching_points[0];
                    let gap = psi - x[self.lay.s(j)];
                    self.switch[j] = (gap.abs() < self.horizon).then_some(gap.abs());
                    Mode::Bang {
                        phase: 0,
                        dir: sgn(gap),
                    }
                }
                Law::Params(ControllerParams::Practical(agents)) => {
                    let end = self.practical_ends[j][0];
                    self.switch[j] = (agents[j].phases() > 1 && end < self.horizon).then_some(end);
                    Mode::Pi {
                        phase: 0,
                        active: false,
                        sat: 0.0,
                    }
                }
                Law::Playback { .. } => Mode::Playback { cell: 0 },
            };
            modes.push(mode);
        }
        let mut fz = Frozen {
            modes,
            inside: vec![false; m * n],
            side: vec![1.0; m * n],
            in_z: vec![false; m],
            pos_noise: vec![0.0; m],
            vel_noise: vec![0.0; m],
        };
        self.apply_sample(0, &mut fz);
        fz
    }

    fn enter_z(&mut self, t: f64, i: usize, x: &mut [f64], fz: &mut Frozen) -> Result<()> {
        x[self.lay.r(i)] = 0.0;
        fz.in_z[i] = true;
        if self.lay.sens {
            ipa::zero_clamp_reset(&mut x[self.lay.rp(i)]);
        }
        self.log(t, EventKind::RHitsZero { target: i }, None)
    }

    /// Applies the next scheduled controller switch of agent `j` at `t`.
    fn switch_agent(
        &mut self,
        j: usize,
        t: f64,
        x: &mut [f64],
        fz: &mut Frozen,
        f_minus: f64,
        instant_tau: &mut Option<Vec<f64>>,
    ) -> Result<()> {
        let params = self.params().expect("scheduled switch without parameters");
        let m = self.lay.m;
        let horizon = self.horizon;
        let sens = self.lay.sens;
        let spr = self.lay.sp(j);
        let (new_mode, tau, kind) = match fz.modes[j] {
            Mode::Bang { phase, dir } => {
                let pa = self.optimal(j);
                let tau = if dir != 0.0 {
                    let s_prime = if sens {
                        x[spr.clone()].to_vec()
                    } else {
                        vec![0.0; spr.len()]
                    };
                    x[self.lay.s(j)] = pa.switching_points[phase];
                    ipa::switching_point_tau(&s_prime, dir, params.local_switching_index(phase, m))
                } else {
                    self.last_tau[j].clone()
                };
                self.switch[j] = if phase + 1 < pa.phases() {
                    let end = t + pa.durations[phase].max(0.0);
                    (end < horizon).then_some(end)
                } else {
                    None
                };
                (
                    Mode::Track { phase, sat: 0.0 },
                    tau,
                    EventKind::ReachSwitchPoint { agent: j, phase },
                )
            }
            Mode::Track { phase, .. } => {
                let pa = self.optimal(j);
                let mut tau = self.last_tau[j].clone();
                tau[params.local_duration_index(phase, m)] += 1.0;
                let next = phase + 1;
                let gap = pa.switching_points[next] - x[self.lay.s(j)];
                let arrive = t + gap.abs();
                self.switch[j] = (arrive < horizon).then_some(arrive);
                (
                    Mode::Bang {
                        phase: next,
                        dir: sgn(gap),
                    },
                    tau,
                    EventKind::TrackPeriodEnd { agent: j, phase },
                )
            }
            Mode::Pi { phase, .. } => {
                let indices: Vec<usize> = (0..=phase).map(|l| params.local_duration_index(l, m)).collect();
                let tau = ipa::period_end_tau(spr.len(), &indices);
                let next = phase + 1;
                x[self.lay.integ(j)] = 0.0;
                let phases = self.practical(j).phases();
                let end = self.practical_ends[j][next];
                self.switch[j] = (next + 1 < phases && end < horizon).then_some(end);
                (
                    Mode::Pi {
                        phase: next,
                        active: false,
                        sat: 0.0,
                    },
                    tau,
                    EventKind::TrackPeriodEnd { agent: j, phase },
                )
            }
            Mode::Playback { .. } => unreachable!("playback agents have no schedule"),
        };
        self.kin(t, t);
        let f_plus = self.natural_control(j, new_mode, x, fz);
        if sens {
            ipa::apply_jump(&mut x[spr.clone()], f_minus, f_plus, &tau);
            if matches!(new_mode, Mode::Pi { .. }) {
                for k in self.lay.ip(j) {
                    x[k] = 0.0;
                }
            }
        }
        fz.modes[j] = new_mode;
        let global = sens.then(|| self.globalize(j, &tau));
        self.log(t, kind, global)?;
        self.last_tau[j] = tau.clone();
        *instant_tau = Some(tau);
        Ok(())
    }

    /// Handles everything that happens at `t`; returns whether anything was
    /// logged.
    fn process_events(
        &mut self,
        t: f64,
        x: &mut [f64],
        fz: &mut Frozen,
        triggered: &[Guard],
        initial: bool,
    ) -> Result<bool> {
        let before = self.events.len();
        let (n, m) = (self.lay.n, self.lay.m);
        let fz_prev = fz.clone();
        let t_left = self.last_mid;
        if initial {
            self.log(t, EventKind::Start, None)?;
        }
        while self.bp_next < self.breakpoints.len() && self.breakpoints[self.bp_next].0 <= t {
            let target = self.breakpoints[self.bp_next].1;
            self.bp_next += 1;
            self.log(t, EventKind::TargetBreakpoint { target }, None)?;
        }
        if let Some(period) = self.sample_period {
            loop {
                let ts = self.sample_next as f64 * period;
                if ts > t || ts >= self.horizon {
                    break;
                }
                self.apply_sample(self.sample_next, fz);
                self.sample_next += 1;
                self.log(t, EventKind::ControlSample, None)?;
            }
        }

        // sensing memberships and the zero clamp
        self.kin(t, t);
        let mut handled_sense = vec![false; m * n];
        for g in triggered {
            match *g {
                Guard::Sense { i, j } => {
                    let k = i * n + j;
                    handled_sense[k] = true;
                    fz.inside[k] = !fz.inside[k];
                    if fz.inside[k] {
                        fz.side[k] = side_of(self.th[i] - x[self.lay.s(j)]);
                        self.agent_sensed[j] = true;
                        self.log(t, EventKind::SenseEnter { target: i, agent: j }, None)?;
                    } else {
                        self.log(t, EventKind::SenseExit { target: i, agent: j }, None)?;
                    }
                }
                Guard::Align { i, j } => {
                    let k = i * n + j;
                    handled_sense[k] = true;
                    fz.side[k] = -fz.side[k];
                    self.log(t, EventKind::TargetPass { target: i, agent: j }, None)?;
                }
                _ => {}
            }
        }
        for i in 0..m {
            for j in 0..n {
                let k = i * n + j;
                if handled_sense[k] {
                    continue;
                }
                let r = self.sc.agents[j].sensing_range;
                let d = self.th[i] - x[self.lay.s(j)];
                if fz.inside[k] && d.abs() > r + BAND {
                    fz.inside[k] = false;
                    self.log(t, EventKind::SenseExit { target: i, agent: j }, None)?;
                } else if !fz.inside[k] && d.abs() < r - BAND {
                    fz.inside[k] = true;
                    fz.side[k] = side_of(d);
                    self.agent_sensed[j] = true;
                    self.log(t, EventKind::SenseEnter { target: i, agent: j }, None)?;
                } else if fz.inside[k] && fz.side[k] * d < -BAND {
                    fz.side[k] = -fz.side[k];
                    self.log(t, EventKind::TargetPass { target: i, agent: j }, None)?;
                }
            }
        }
        let mut handled_z = vec![false; m];
        for g in triggered {
            match *g {
                Guard::RZero { i } => {
                    handled_z[i] = true;
                    self.enter_z(t, i, x, fz)?;
                }
                Guard::ZExit { i } => {
                    handled_z[i] = true;
                    fz.in_z[i] = false;
                    self.log(t, EventKind::ZExit { target: i }, None)?;
                }
                _ => {}
            }
        }
        self.controls_and_coverage(x, fz);
        for i in 0..m {
            if handled_z[i] {
                continue;
            }
            let tg = &self.sc.targets[i];
            let rate = tg.growth_rate - tg.reduction_rate * self.coverage(i);
            if fz.in_z[i] && rate > BAND {
                fz.in_z[i] = false;
                self.log(t, EventKind::ZExit { target: i }, None)?;
            } else if !fz.in_z[i] && x[self.lay.r(i)] <= ZERO_BOUNDARY_TOL && rate < -BAND {
                self.enter_z(t, i, x, fz)?;
            }
        }

        // controller schedule
        let mut fresh = vec![initial; n];
        let mut instant_tau: Vec<Option<Vec<f64>>> = vec![None; n];
        for j in 0..n {
            let mut first = true;
            while let Some(ts) = self.switch[j] {
                if ts > t {
                    break;
                }
                let f_minus = if first {
                    self.kin(t, t_left);
                    self.control(j, fz_prev.modes[j], x, &fz_prev)
                } else {
                    self.kin(t, t);
                    self.natural_control(j, fz.modes[j], x, fz)
                };
                first = false;
                self.switch_agent(j, t, x, fz, f_minus, &mut instant_tau[j])?;
                fresh[j] = true;
            }
        }

        // saturation
        self.kin(t, t);
        for j in 0..n {
            let forced = triggered.contains(&Guard::Sat { j });
            let (value, sat) = match fz.modes[j] {
                Mode::Track { phase, sat } => (self.track_velocity(j, phase, fz), sat),
                Mode::Pi { phase, active, sat } => (self.pi_raw(j, phase, active, x, fz), sat),
                _ => continue,
            };
            let new_sat = if fresh[j] {
                if value.abs() > 1.0 {
                    sgn(value)
                } else {
                    0.0
                }
            } else if forced {
                if sat != 0.0 {
                    0.0
                } else {
                    side_of(value)
                }
            } else if sat == 0.0 {
                if value.abs() > 1.0 + BAND {
                    sgn(value)
                } else {
                    0.0
                }
            } else if sat * value < 1.0 - BAND {
                0.0
            } else {
                sat
            };
            match &mut fz.modes[j] {
                Mode::Track { sat, .. } | Mode::Pi { sat, .. } => *sat = new_sat,
                _ => {}
            }
            if new_sat != sat && !fresh[j] {
                self.log(t, EventKind::SaturationCross { agent: j }, None)?;
            }
        }

        // integrator activation
        for j in 0..n {
            let Mode::Pi {
                phase, active: false, ..
            } = fz.modes[j]
            else {
                continue;
            };
            let pa = self.practical(j);
            self.kin(t, t);
            let e = self.pi_error(j, phase, x, fz);
            let forced = triggered.contains(&Guard::Activate { j });
            if !(forced || (pa.gain_p * e).abs() <= pa.switch_tolerance) {
                continue;
            }
            if let Mode::Pi { active, .. } = &mut fz.modes[j] {
                *active = true;
            }
            x[self.lay.integ(j)] = 0.0;
            let mut logged = None;
            if self.lay.sens {
                let params = self.params().expect("parameters");
                let spr = self.lay.sp(j);
                let tau: Vec<f64> = if forced {
                    self.kin(t, t_left);
                    let u = self.control(j, fz_prev.modes[j], x, &fz_prev);
                    let w = pa.combinations[phase].weights();
                    let edot: f64 = (0..m).map(|i| w[i] * self.thd[i]).sum::<f64>() - u;
                    let mut e_prime: Vec<f64> = x[spr.clone()].iter().map(|s| -s).collect();
                    for i in 0..m {
                        e_prime[params.local_weight_index(phase, i, m)] += self.th[i] + fz.pos_noise[i];
                    }
                    ipa::activation_tau(&e_prime, edot)
                } else {
                    instant_tau[j].clone().unwrap_or_else(|| vec![0.0; spr.len()])
                };
                for (o, k) in self.lay.ip(j).enumerate() {
                    x[k] = -e * tau[o];
                }
                logged = Some(self.globalize(j, &tau));
            }
            self.log(t, EventKind::IntegratorActivate { agent: j, phase }, logged)?;
        }

        if t >= self.horizon {
            self.log(t, EventKind::HorizonEnd, None)?;
        }
        Ok(self.events.len() > before)
    }

    fn next_stop(&self, t: f64) -> f64 {
        let h = self.h;
        let k = (t / h).floor();
        let mut grid = (k + 1.0) * h;
        if grid <= t {
            grid = (k + 2.0) * h;
        }
        let mut next = grid.min(self.horizon);
        if let Some(&(tb, _)) = self.breakpoints.get(self.bp_next) {
            next = next.min(tb);
        }
        if let Some(period) = self.sample_period {
            next = next.min(self.sample_next as f64 * period);
        }
        for s in self.switch.iter().flatten() {
            next = next.min(*s);
        }
        next
    }

    fn sample(&self, t: f64, x: &[f64], k1: &[f64], mid: Option<Vec<f64>>) -> Sample {
        let lay = &self.lay;
        Sample {
            time: t,
            positions: (0..lay.n).map(|j| x[lay.s(j)]).collect(),
            uncertainties: (0..lay.m).map(|i| x[lay.r(i)]).collect(),
            controls: (0..lay.n).map(|j| k1[lay.s(j)]).collect(),
            targets: self
                .sc
                .targets
                .iter()
                .map(|tg| tg.trajectory.position_at(t))
                .collect(),
            midpoint_uncertainties: mid,
        }
    }

    fn sens_state(&self, t: f64, x: &[f64]) -> SensitivityState {
        let lay = &self.lay;
        let d = lay.d;
        let row = |j: usize, r: std::ops::Range<usize>| {
            let mut v = vec![0.0; d];
            v[lay.offsets[j]..lay.offsets[j + 1]].copy_from_slice(&x[r]);
            v
        };
        SensitivityState {
            time: t,
            s_prime: (0..lay.n).map(|j| row(j, lay.sp(j))).collect(),
            integrator_prime: (0..lay.n).map(|j| row(j, lay.ip(j))).collect(),
            r_prime: (0..lay.m).map(|i| x[lay.rp(i)].to_vec()).collect(),
        }
    }

    fn run(mut self) -> Result<SimOutput> {
        let lay = self.lay.clone();
        let sens = lay.sens;
        let total = lay.total();
        let d = lay.d;
        let horizon = self.horizon;
        let mut x = vec![0.0; total];
        for (j, a) in self.sc.agents.iter().enumerate() {
            x[lay.s(j)] = a.initial_position;
        }
        for (i, tg) in self.sc.targets.iter().enumerate() {
            x[lay.r(i)] = tg.initial_uncertainty;
        }
        let mut fz = self.initial_frozen(&x);
        self.process_events(0.0, &mut x, &mut fz, &[], true)?;
        let mut k1 = vec![0.0; total];
        self.rhs(0.0, 0.0, &x, &fz, &mut k1, sens);
        let mut samples = vec![self.sample(0.0, &x, &k1, None)];
        let mut trace = Vec::new();
        if self.opts.trace_sensitivities && sens {
            trace.push(self.sens_state(0.0, &x));
        }
        let mut cost_integral = 0.0;
        let mut grad = vec![0.0; d];
        let mut seg = vec![0.0; d];
        let mut seg_start = 0.0;
        let mut segments = Vec::new();
        let mut x1 = vec![0.0; total];
        let mut f_end = vec![0.0; total];
        let mut t = 0.0;
        let rr = lay.r(0)..lay.r(0) + lay.m;
        let mut g0 = Vec::new();
        let mut g1 = Vec::new();
        let mut hits: Vec<(Guard, f64)> = Vec::new();
        let mut rm = vec![0.0; lay.m];
        while t < horizon {
            let mut t1 = self.next_stop(t);
            self.rk4(t, t1, &x, &k1, &fz, &mut x1, sens);
            let mid = t + 0.5 * (t1 - t);
            self.eval_guards(t, mid, &x, &fz);
            std::mem::swap(&mut g0, &mut self.guards);
            self.eval_guards(t1, mid, &x1, &fz);
            std::mem::swap(&mut g1, &mut self.guards);
            hits.clear();
            for idx in 0..g0.len() {
                let (guard, a, ra) = g0[idx];
                let (_, b, rb) = g1[idx];
                let hit = if b < -guard.detect_tol() {
                    Some(self.localize(idx, t, t1, &x, &k1, &fz))
                } else if !ra.is_nan() {
                    self.graze(idx, t, t1, (a, ra), (b, rb), &x, &k1, &fz)
                } else {
                    None
                };
                if let Some(te) = hit {
                    hits.push((guard, te));
                }
            }
            let mut triggered = Vec::new();
            if !hits.is_empty() {
                let te = hits.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
                triggered = hits.iter().filter(|h| h.1 == te).map(|h| h.0).collect();
                if te < t1 {
                    t1 = te;
                    self.rk4(t, t1, &x, &k1, &fz, &mut x1, sens);
                }
            }
            let h = t1 - t;
            let mid = t + 0.5 * h;
            self.rhs(t1, mid, &x1, &fz, &mut f_end, sens);
            for (o, k) in rr.clone().enumerate() {
                rm[o] = 0.5 * (x[k] + x1[k]) + h / 8.0 * (k1[k] - f_end[k]);
            }
            cost_integral += simpson_panel(h, &x[rr.clone()], &rm, &x1[rr.clone()]);
            if sens {
                for i in 0..lay.m {
                    for (o, k) in lay.rp(i).enumerate() {
                        let (a, b) = (x[k], x1[k]);
                        let mid = 0.5 * (a + b) + h / 8.0 * (k1[k] - f_end[k]);
                        let v = h / 6.0 * (a + 4.0 * mid + b);
                        grad[o] += v;
                        seg[o] += v;
                    }
                }
            }
            self.last_mid = mid;
            t = t1;
            std::mem::swap(&mut x, &mut x1);
            let any = self.process_events(t, &mut x, &mut fz, &triggered, false)?;
            if any {
                self.rhs(t, t, &x, &fz, &mut k1, sens);
                if sens {
                    segments.push(SegmentContribution {
                        start: seg_start,
                        end: t,
                        integral: std::mem::replace(&mut seg, vec![0.0; d]),
                    });
                    seg_start = t;
                }
            } else {
                std::mem::swap(&mut k1, &mut f_end);
            }
            if h > 0.0 {
                if self.opts.record_samples || t >= horizon {
                    samples.push(self.sample(t, &x, &k1, Some(rm.clone())));
                    if self.opts.trace_sensitivities && sens {
                        trace.push(self.sens_state(t, &x));
                    }
                }
            } else if let Some(last) = samples.last_mut().filter(|s| s.time == t) {
                last.controls = (0..lay.n).map(|j| k1[lay.s(j)]).collect();
            }
        }
        if sens && seg_start < t {
            segments.push(SegmentContribution {
                start: seg_start,
                end: t,
                integral: seg,
            });
        }
        let sensitivity = sens.then(|| SensitivityOutput {
            num_params: d,
            block_offsets: lay.offsets.clone(),
            integral: grad,
            segments,
            tau_prime: std::mem::take(&mut self.tau_prime),
            final_state: self.sens_state(t, &x),
            trace,
        });
        Ok(SimOutput {
            horizon,
            step: self.h,
            samples,
            events: std::mem::take(&mut self.events),
            cost: cost_integral / horizon,
            agent_sensed: self.agent_sensed.clone(),
            sensitivity,
            params_vector: None,
            options: self.opts.clone(),
        })
    }
}

//! Minimal reverse-mode differentiation engine.
//!
//! A thread-local tape records one scalar operation per node; [`Var`] is a
//! `Copy` handle (value + node index) that implements [`num_traits::Float`],
//! so any kernel generic over [`crate::scalar::Scalar`] runs under
//! differentiation unchanged. Constants (literals, lifted input data) carry
//! no node and never grow the tape.
//!
//! Three ways to get gradients out:
//!
//! * [`backward`] — seed output adjoints, sweep the whole thread tape.
//! * [`Recording::backward`] — same sweep over a segment captured with
//!   [`record`]; the segment owns its nodes, so it survives tape resets and
//!   backs the per-stage backward entry points (recurrent step, ODE solve).
//! * [`backward_with_detached`] — whole-tape sweep where selected leaf
//!   groups were produced outside the tape; when the sweep reaches such a
//!   group, its registered vector-Jacobian callback is invoked with the
//!   accumulated output adjoints and scatters contributions onto earlier
//!   nodes. This is how the adjoint ODE backward is spliced into a
//!   whole-model gradient.
//!
//! Subgradient conventions: `abs` uses 0 at the kink, `max`/`min` route the
//! full derivative to the winning argument (first argument on ties).
//! Comparisons and branch decisions read values only.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::fmt;

use num_traits::{Float, FloatConst, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    p1: u32,
    d1: f64,
    p2: u32,
    d2: f64,
}

struct TapeInner {
    nodes: Vec<Node>,
    // Recording scopes raise the floor; nodes must not reference anything
    // below it (checked in debug builds).
    floor: u32,
}

thread_local! {
    static TAPE: RefCell<TapeInner> = const {
        RefCell::new(TapeInner { nodes: Vec::new(), floor: 0 })
    };
}

/// Clears the thread's tape. Call before each independent forward pass.
pub fn reset() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.nodes.clear();
        t.floor = 0;
    });
}

/// Number of nodes currently on the thread's tape.
pub fn node_count() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

fn push(node: Node) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        debug_assert!(
            node.p1 == NONE || node.p1 >= t.floor,
            "node references a parent below the active recording scope"
        );
        debug_assert!(
            node.p2 == NONE || node.p2 >= t.floor,
            "node references a parent below the active recording scope"
        );
        let ix = t.nodes.len() as u32;
        assert!(ix != NONE, "tape exhausted");
        t.nodes.push(node);
        ix
    })
}

/// Scalar tracked by the tape. `Copy`, 16 bytes; constants carry no node.
#[derive(Clone, Copy)]
pub struct Var {
    v: f64,
    ix: u32,
}

/// The zero constant; a default `Var` must not alias tape node 0.
impl Default for Var {
    fn default() -> Self {
        constant(0.0)
    }
}

/// Lifts a value as a constant: participates in arithmetic, receives no
/// gradient, never grows the tape.
#[inline]
pub fn constant(v: f64) -> Var {
    Var { v, ix: NONE }
}

/// Creates a differentiable leaf on the thread's tape.
pub fn var(v: f64) -> Var {
    Var { v, ix: push(Node { p1: NONE, d1: 0.0, p2: NONE, d2: 0.0 }) }
}

impl Var {
    /// The tracked numeric value.
    #[inline]
    pub fn value(self) -> f64 {
        self.v
    }

    /// True when this is a constant (not attached to the tape).
    #[inline]
    pub fn is_constant(self) -> bool {
        self.ix == NONE
    }

    #[inline]
    fn unary(self, v: f64, d: f64) -> Var {
        if self.ix == NONE {
            return constant(v);
        }
        Var { v, ix: push(Node { p1: self.ix, d1: d, p2: NONE, d2: 0.0 }) }
    }

    #[inline]
    fn binary(self, rhs: Var, v: f64, da: f64, db: f64) -> Var {
        if self.ix == NONE && rhs.ix == NONE {
            return constant(v);
        }
        Var {
            v,
            ix: push(Node { p1: self.ix, d1: da, p2: rhs.ix, d2: db }),
        }
    }
}

/// Adjoints produced by a backward sweep. Indexed by the [`Var`] handles
/// that were live when the sweep ran; constants report zero.
pub struct Gradients {
    base: u32,
    grads: Vec<f64>,
}

impl Gradients {
    /// Gradient of the seeded outputs with respect to `v`.
    pub fn wrt(&self, v: Var) -> f64 {
        if v.ix == NONE || v.ix < self.base {
            return 0.0;
        }
        let k = (v.ix - self.base) as usize;
        if k < self.grads.len() {
            self.grads[k]
        } else {
            0.0
        }
    }
}

fn sweep(nodes: &[Node], base: u32, grads: &mut [f64], mut on_index: impl FnMut(u32, &mut [f64])) {
    for i in (0..nodes.len()).rev() {
        on_index(base + i as u32, grads);
        let g = grads[i];
        if g == 0.0 {
            continue;
        }
        let n = nodes[i];
        if n.p1 != NONE {
            grads[(n.p1 - base) as usize] += n.d1 * g;
        }
        if n.p2 != NONE {
            grads[(n.p2 - base) as usize] += n.d2 * g;
        }
    }
}

fn seed_into(grads: &mut [f64], base: u32, seeds: &[(Var, f64)]) {
    for &(v, s) in seeds {
        if v.ix == NONE {
            continue;
        }
        debug_assert!(v.ix >= base, "seed below sweep base");
        let k = (v.ix - base) as usize;
        if k < grads.len() {
            grads[k] += s;
        }
    }
}

/// Reverse sweep over the whole thread tape from the given output seeds.
pub fn backward(seeds: &[(Var, f64)]) -> Gradients {
    let nodes = TAPE.with(|t| std::mem::take(&mut t.borrow_mut().nodes));
    let mut grads = vec![0.0; nodes.len()];
    seed_into(&mut grads, 0, seeds);
    sweep(&nodes, 0, &mut grads, |_, _| {});
    TAPE.with(|t| t.borrow_mut().nodes = nodes);
    Gradients { base: 0, grads }
}

/// A group of leaves whose values were computed off-tape, together with the
/// vector-Jacobian callback that propagates their adjoints to earlier nodes.
pub struct DetachedOp {
    /// Leaves created with [`var`] holding the detached results.
    pub outputs: Vec<Var>,
    /// Receives the accumulated adjoints of `outputs` (in order) and returns
    /// gradient contributions for nodes created before the outputs.
    #[allow(clippy::type_complexity)]
    pub vjp: Box<dyn FnMut(&[f64]) -> Vec<(Var, f64)>>,
}

/// Like [`backward`], invoking each detached op's callback once the sweep
/// has finalized the adjoints of its outputs. Callbacks are free to use
/// [`record`] internally.
pub fn backward_with_detached(seeds: &[(Var, f64)], mut detached: Vec<DetachedOp>) -> Gradients {
    let (nodes, floor_prev) = TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let nodes = std::mem::take(&mut t.nodes);
        let fp = t.floor;
        t.floor = 0;
        (nodes, fp)
    });

    // An op fires when the sweep reaches the highest-indexed of its outputs:
    // every consumer lives above that point, so the adjoints are final.
    let mut triggers: Vec<(u32, usize)> = detached
        .iter()
        .enumerate()
        .map(|(k, op)| {
            let hi = op.outputs.iter().map(|o| o.ix).max().expect("detached op with no outputs");
            assert!(hi != NONE, "detached outputs must be tape leaves");
            (hi, k)
        })
        .collect();
    triggers.sort_unstable_by_key(|t| std::cmp::Reverse(t.0));

    let mut grads = vec![0.0; nodes.len()];
    seed_into(&mut grads, 0, seeds);
    let mut next = 0usize;
    sweep(&nodes, 0, &mut grads, |i, grads| {
        while next < triggers.len() && triggers[next].0 == i {
            let op = &mut detached[triggers[next].1];
            let upstream: Vec<f64> =
                op.outputs.iter().map(|o| grads[o.ix as usize]).collect();
            for (target, g) in (op.vjp)(&upstream) {
                if target.ix == NONE {
                    continue;
                }
                debug_assert!(target.ix < i, "detached op must scatter onto earlier nodes");
                grads[target.ix as usize] += g;
            }
            next += 1;
        }
    });

    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        debug_assert!(t.nodes.is_empty(), "tape must not retain nodes pushed by callbacks");
        t.nodes = nodes;
        t.floor = floor_prev;
    });
    Gradients { base: 0, grads }
}

/// Tape segment captured by [`record`]. Owns its nodes; independent of the
/// thread tape from the moment it is returned.
pub struct Recording {
    base: u32,
    nodes: Vec<Node>,
}

impl Recording {
    /// Reverse sweep over this segment only. Every [`Var`] involved must
    /// have been created inside the recorded closure.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Gradients {
        let mut grads = vec![0.0; self.nodes.len()];
        seed_into(&mut grads, self.base, seeds);
        sweep(&self.nodes, self.base, &mut grads, |_, _| {});
        Gradients { base: self.base, grads }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when nothing was recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Runs `f`, capturing every node it pushes into an owned [`Recording`].
/// The thread tape is restored to its prior state afterwards; `f` must not
/// touch variables created outside itself (checked in debug builds).
pub fn record<R>(f: impl FnOnce() -> R) -> (R, Recording) {
    let (base, floor_prev) = TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let b = t.nodes.len() as u32;
        let fp = t.floor;
        t.floor = b;
        (b, fp)
    });
    let out = f();
    let nodes = TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let tail = t.nodes.split_off(base as usize);
        t.floor = floor_prev;
        tail
    });
    (out, Recording { base, nodes })
}

// ---------------------------------------------------------------------------
// Operator and numeric trait implementations.
// ---------------------------------------------------------------------------

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ix == NONE {
            write!(f, "Var({:?})", self.v)
        } else {
            write!(f, "Var({:?}@{})", self.v, self.ix)
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.v, f)
    }
}

impl PartialEq for Var {
    fn eq(&self, other: &Self) -> bool {
        self.v == other.v
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.v.partial_cmp(&other.v)
    }
}

impl std::ops::Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: Var) -> Var {
        self.binary(rhs, self.v + rhs.v, 1.0, 1.0)
    }
}

impl std::ops::Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: Var) -> Var {
        self.binary(rhs, self.v - rhs.v, 1.0, -1.0)
    }
}

impl std::ops::Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: Var) -> Var {
        self.binary(rhs, self.v * rhs.v, rhs.v, self.v)
    }
}

impl std::ops::Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: Var) -> Var {
        let inv = 1.0 / rhs.v;
        self.binary(rhs, self.v * inv, inv, -self.v * inv * inv)
    }
}

impl std::ops::Rem for Var {
    type Output = Var;
    fn rem(self, rhs: Var) -> Var {
        // a % b = a - b * trunc(a / b); trunc is flat almost everywhere.
        let q = (self.v / rhs.v).trunc();
        self.binary(rhs, self.v % rhs.v, 1.0, -q)
    }
}

impl std::ops::Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.v, -1.0)
    }
}

impl Zero for Var {
    fn zero() -> Self {
        constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.v == 0.0
    }
}

impl One for Var {
    fn one() -> Self {
        constant(1.0)
    }
}

impl Num for Var {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(str: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        <f64 as Num>::from_str_radix(str, radix).map(constant)
    }
}

impl ToPrimitive for Var {
    fn to_i64(&self) -> Option<i64> {
        self.v.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.v.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.v)
    }
}

impl NumCast for Var {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(constant)
    }
}

impl FromPrimitive for Var {
    fn from_i64(n: i64) -> Option<Self> {
        Some(constant(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(constant(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(constant(n))
    }
}

impl FloatConst for Var {
    fn E() -> Self {
        constant(std::f64::consts::E)
    }
    fn FRAC_1_PI() -> Self {
        constant(std::f64::consts::FRAC_1_PI)
    }
    fn FRAC_1_SQRT_2() -> Self {
        constant(std::f64::consts::FRAC_1_SQRT_2)
    }
    fn FRAC_2_PI() -> Self {
        constant(std::f64::consts::FRAC_2_PI)
    }
    fn FRAC_2_SQRT_PI() -> Self {
        constant(std::f64::consts::FRAC_2_SQRT_PI)
    }
    fn FRAC_PI_2() -> Self {
        constant(std::f64::consts::FRAC_PI_2)
    }
    fn FRAC_PI_3() -> Self {
        constant(std::f64::consts::FRAC_PI_3)
    }
    fn FRAC_PI_4() -> Self {
        constant(std::f64::consts::FRAC_PI_4)
    }
    fn FRAC_PI_6() -> Self {
        constant(std::f64::consts::FRAC_PI_6)
    }
    fn FRAC_PI_8() -> Self {
        constant(std::f64::consts::FRAC_PI_8)
    }
    fn LN_10() -> Self {
        constant(std::f64::consts::LN_10)
    }
    fn LN_2() -> Self {
        constant(std::f64::consts::LN_2)
    }
    fn LOG10_E() -> Self {
        constant(std::f64::consts::LOG10_E)
    }
    fn LOG2_E() -> Self {
        constant(std::f64::consts::LOG2_E)
    }
    fn PI() -> Self {
        constant(std::f64::consts::PI)
    }
    fn SQRT_2() -> Self {
        constant(std::f64::consts::SQRT_2)
    }
}

impl Float for Var {
    fn nan() -> Self {
        constant(f64::NAN)
    }
    fn infinity() -> Self {
        constant(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        constant(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        constant(-0.0)
    }
    fn min_value() -> Self {
        constant(f64::MIN)
    }
    fn min_positive_value() -> Self {
        constant(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        constant(f64::MAX)
    }
    fn epsilon() -> Self {
        constant(f64::EPSILON)
    }
    fn is_nan(self) -> bool {
        self.v.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.v.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.v.is_finite()
    }
    fn is_normal(self) -> bool {
        self.v.is_normal()
    }
    fn classify(self) -> std::num::FpCategory {
        self.v.classify()
    }
    fn floor(self) -> Self {
        constant(self.v.floor())
    }
    fn ceil(self) -> Self {
        constant(self.v.ceil())
    }
    fn round(self) -> Self {
        constant(self.v.round())
    }
    fn trunc(self) -> Self {
        constant(self.v.trunc())
    }
    fn fract(self) -> Self {
        self.unary(self.v.fract(), 1.0)
    }
    fn abs(self) -> Self {
        let d = if self.v > 0.0 {
            1.0
        } else if self.v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.v.abs(), d)
    }
    fn signum(self) -> Self {
        constant(self.v.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.v.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.v.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let inv = 1.0 / self.v;
        self.unary(inv, -inv * inv)
    }
    fn powi(self, n: i32) -> Self {
        self.unary(self.v.powi(n), n as f64 * self.v.powi(n - 1))
    }
    fn powf(self, n: Self) -> Self {
        let v = self.v.powf(n.v);
        let da = n.v * self.v.powf(n.v - 1.0);
        let db = if self.v > 0.0 { v * self.v.ln() } else { 0.0 };
        self.binary(n, v, da, db)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.unary(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.v.exp2();
        self.unary(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.unary(self.v.ln(), 1.0 / self.v)
    }
    fn log(self, base: Self) -> Self {
        let lb = base.v.ln();
        let v = self.v.ln() / lb;
        self.binary(base, v, 1.0 / (self.v * lb), -self.v.ln() / (base.v * lb * lb))
    }
    fn log2(self) -> Self {
        self.unary(self.v.log2(), 1.0 / (self.v * std::f64::consts::LN_2))
    }
    fn log10(self) -> Self {
        self.unary(self.v.log10(), 1.0 / (self.v * std::f64::consts::LN_10))
    }
    fn max(self, other: Self) -> Self {
        if self.v >= other.v {
            self.binary(other, self.v, 1.0, 0.0)
        } else {
            self.binary(other, other.v, 0.0, 1.0)
        }
    }
    fn min(self, other: Self) -> Self {
        if self.v <= other.v {
            self.binary(other, self.v, 1.0, 0.0)
        } else {
            self.binary(other, other.v, 0.0, 1.0)
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.v > other.v {
            self.binary(other, self.v - other.v, 1.0, -1.0)
        } else {
            self.binary(other, 0.0, 0.0, 0.0)
        }
    }
    fn cbrt(self) -> Self {
        let c = self.v.cbrt();
        self.unary(c, 1.0 / (3.0 * c * c))
    }
    fn hypot(self, other: Self) -> Self {
        let h = self.v.hypot(other.v);
        if h == 0.0 {
            self.binary(other, 0.0, 0.0, 0.0)
        } else {
            self.binary(other, h, self.v / h, other.v / h)
        }
    }
    fn sin(self) -> Self {
        self.unary(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.v.cos(), -self.v.sin())
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        self.unary(t, 1.0 + t * t)
    }
    fn asin(self) -> Self {
        self.unary(self.v.asin(), 1.0 / (1.0 - self.v * self.v).sqrt())
    }
    fn acos(self) -> Self {
        self.unary(self.v.acos(), -1.0 / (1.0 - self.v * self.v).sqrt())
    }
    fn atan(self) -> Self {
        self.unary(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn atan2(self, other: Self) -> Self {
        let den = self.v * self.v + other.v * other.v;
        self.binary(other, self.v.atan2(other.v), other.v / den, -self.v / den)
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.unary(self.v.exp_m1(), self.v.exp())
    }
    fn ln_1p(self) -> Self {
        self.unary(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    fn sinh(self) -> Self {
        self.unary(self.v.sinh(), self.v.cosh())
    }
    fn cosh(self) -> Self {
        self.unary(self.v.cosh(), self.v.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn asinh(self) -> Self {
        self.unary(self.v.asinh(), 1.0 / (self.v * self.v + 1.0).sqrt())
    }
    fn acosh(self) -> Self {
        self.unary(self.v.acosh(), 1.0 / (self.v * self.v - 1.0).sqrt())
    }
    fn atanh(self) -> Self {
        self.unary(self.v.atanh(), 1.0 / (1.0 - self.v * self.v))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.v.integer_decode()
    }
    fn to_degrees(self) -> Self {
        self.unary(self.v.to_degrees(), 180.0 / std::f64::consts::PI)
    }
    fn to_radians(self) -> Self {
        self.unary(self.v.to_radians(), std::f64::consts::PI / 180.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        reset();
        let x = var(3.0);
        let y = var(5.0);
        let z = x * y + x;
        let g = backward(&[(z, 1.0)]);
        assert_eq!(g.wrt(x), 6.0);
        assert_eq!(g.wrt(y), 3.0);
    }

    #[test]
    fn transcendental_chain() {
        reset();
        let x = var(0.7);
        let y = (x.exp() * x.tanh()).ln();
        let g = backward(&[(y, 1.0)]);
        // d/dx [x + ln tanh x] = 1 + (1 - tanh^2 x) / tanh x
        let t = 0.7f64.tanh();
        let expect = 1.0 + (1.0 - t * t) / t;
        assert!((g.wrt(x) - expect).abs() < 1e-12);
    }

    #[test]
    fn constants_stay_off_tape() {
        reset();
        let c = constant(2.0) * constant(21.0);
        assert!(c.is_constant());
        assert_eq!(c.value(), 42.0);
        assert_eq!(node_count(), 0);
    }

    #[test]
    fn max_routes_to_winner_and_abs_kink_is_flat() {
        reset();
        let a = var(2.0);
        let b = var(-1.0);
        let m = a.max(b);
        let g = backward(&[(m, 1.0)]);
        assert_eq!(g.wrt(a), 1.0);
        assert_eq!(g.wrt(b), 0.0);

        reset();
        let z = var(0.0);
        let g = backward(&[(z.abs(), 1.0)]);
        assert_eq!(g.wrt(z), 0.0);
    }

    #[test]
    fn recording_is_independent_of_the_thread_tape() {
        reset();
        let outer = var(1.0);
        let ((x, y), rec) = record(|| {
            let x = var(2.0);
            (x, x * x * x)
        });
        // Recording owns its segment; the outer tape is back to one leaf.
        assert_eq!(node_count(), 1);
        let g = rec.backward(&[(y, 1.0)]);
        assert_eq!(g.wrt(x), 12.0);
        assert_eq!(g.wrt(outer), 0.0);
    }

    #[test]
    fn detached_callback_scatters_onto_earlier_nodes() {
        reset();
        // y = 3 * x computed "off-tape": the leaf out holds the value, the
        // callback supplies d(out)/d(x) = 3.
        let x = var(2.0);
        let out = var(3.0 * x.value());
        let z = out * out; // dz/dout = 2*out = 12
        let ops = vec![DetachedOp {
            outputs: vec![out],
            vjp: Box::new(move |up: &[f64]| vec![(x, 3.0 * up[0])]),
        }];
        let g = backward_with_detached(&[(z, 1.0)], ops);
        assert_eq!(g.wrt(x), 36.0); // dz/dx = 2 * (3x) * 3
    }

    #[test]
    fn repeated_backward_from_different_seeds() {
        reset();
        let x = var(1.5);
        let y = var(-0.5);
        let a = x * y;
        let b = x + y;
        let ga = backward(&[(a, 1.0)]);
        let gb = backward(&[(b, 1.0)]);
        assert_eq!(ga.wrt(x), -0.5);
        assert_eq!(gb.wrt(x), 1.0);
    }
}

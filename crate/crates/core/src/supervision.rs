//! From voted pseudo ground truth to per-proposal training targets, and the
//! multi-task loss of the re-classification / re-localization heads.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, BBox};
use crate::mil::{ScoreMatrix, PROB_EPS};
use crate::voting::Supervision;

/// `(dx, dy, dw, dh)` box regression offsets.
pub type Offsets = [f64; 4];

pub const DEFAULT_FG_IOU: f64 = 0.5;
pub const DEFAULT_BG_IOU: (f64, f64) = (0.1, 0.5);
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Training target of one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Assignment {
    Foreground { class: usize, offsets: Offsets },
    Background,
    Ignored,
}

impl Assignment {
    pub fn weight(&self) -> f64 {
        match self {
            Assignment::Ignored => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalTargets {
    pub assignments: Vec<Assignment>,
}

impl ProposalTargets {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn num_foreground(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| matches!(a, Assignment::Foreground { .. }))
            .count()
    }

    pub fn num_active(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| !matches!(a, Assignment::Ignored))
            .count()
    }
}

/// Matches each proposal to its best-overlapping supervision box.
///
/// IoU >= `fg_iou` makes a foreground target with encoded offsets, IoU in
/// `[lo, hi)` a background target, anything else is ignored. Ties between
/// supervision boxes go to the first in class order.
pub fn assign_targets(
    boxes: &[BBox],
    sup: &Supervision,
    fg_iou: f64,
    (bg_lo, bg_hi): (f64, f64),
) -> Result<ProposalTargets> {
    if !(0.0..=bg_hi).contains(&bg_lo) || bg_hi > 1.0 {
        return Err(Error::config(format!("invalid background band [{bg_lo}, {bg_hi})")));
    }
    if fg_iou < bg_hi || fg_iou > 1.0 {
        return Err(Error::config(format!(
            "foreground IoU {fg_iou} overlaps background band [{bg_lo}, {bg_hi})"
        )));
    }
    let assignments = boxes
        .iter()
        .map(|p| {
            let best = sup
                .iter()
                .map(|(c, g)| (iou(p, g), c, g))
                .fold(None, |acc: Option<(f64, usize, &BBox)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((o, class, g)) if o >= fg_iou => Assignment::Foreground {
                    class,
                    offsets: encode_offsets(p, g),
                },
                Some((o, _, _)) if o >= bg_lo && o < bg_hi => Assignment::Background,
                _ => Assignment::Ignored,
            }
        })
        .collect();
    Ok(ProposalTargets { assignments })
}

/// Centre/log-size parametrization of `target` relative to `proposal`.
pub fn encode_offsets(proposal: &BBox, target: &BBox) -> Offsets {
    let (pcx, pcy, pw, ph) = proposal.center_size();
    let (gcx, gcy, gw, gh) = target.center_size();
    [(gcx - pcx) / pw, (gcy - pcy) / ph, (gw / pw).ln(), (gh / ph).ln()]
}

/// Inverse of [`encode_offsets`] before rounding: `[x0, y0, x1, y1]` reals.
pub fn decode_offsets_exact(proposal: &BBox, t: &Offsets) -> [f64; 4] {
    let (pcx, pcy, pw, ph) = proposal.center_size();
    let cx = pcx + t[0] * pw;
    let cy = pcy + t[1] * ph;
    let w = pw * t[2].exp();
    let h = ph * t[3].exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Shifts `proposal` by `t`, rounds to whole pixels and clips to the image.
///
/// Returns [`Error::EmptyBox`] when nothing of the box remains.
pub fn decode_offsets(proposal: &BBox, t: &Offsets, height: u32, width: u32) -> Result<BBox> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("regression offsets must be finite"));
    }
    let r = decode_offsets_exact(proposal, t);
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::EmptyBox);
    }
    // Saturating casts keep far-away boxes representable until clipping.
    let [x0, y0, x1, y1] = r.map(|v| v.round() as i64);
    clip_box(x0, y0, x1, y1, height, width).map_err(|_| Error::EmptyBox)
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Value and gradients of the multi-task loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SlvLoss {
    pub loss: f64,
    pub cls: f64,
    pub loc: f64,
    pub grad_scores: Array2<f64>,
    pub grad_offsets: Vec<Offsets>,
    /// No proposal carried a target; the loss is zero by definition.
    pub vacuous: bool,
}

/// Cross-entropy over non-ignored proposals plus smooth-L1 over foreground
/// offsets.
///
/// `phi_s` has `C + 1` rows with background last. The classification term is
/// averaged over non-ignored proposals, the localization term over the
/// `4 * N_fg` foreground offset coordinates.
pub fn slv_loss(phi_s: &ScoreMatrix, t_s: &[Offsets], targets: &ProposalTargets) -> Result<SlvLoss> {
    let (rows, r_count) = phi_s.shape();
    if rows < 2 {
        return Err(Error::input("re-classification scores need a background row"));
    }
    if t_s.len() != r_count || targets.len() != r_count {
        return Err(Error::input(format!(
            "{r_count} score columns, {} offset rows, {} targets",
            t_s.len(),
            targets.len()
        )));
    }
    let bg_row = rows - 1;
    let mut grad_scores = Array2::zeros((rows, r_count));
    let mut grad_offsets = vec![[0.0; 4]; r_count];

    let n_active = targets.num_active();
    if n_active == 0 {
        return Ok(SlvLoss {
            loss: 0.0,
            cls: 0.0,
            loc: 0.0,
            grad_scores,
            grad_offsets,
            vacuous: true,
        });
    }
    let n_fg = targets.num_foreground();

    let mut cls = 0.0;
    let mut loc = 0.0;
    let cls_scale = 1.0 / n_active as f64;
    let loc_scale = if n_fg > 0 { 1.0 / (4 * n_fg) as f64 } else { 0.0 };
    for (r, a) in targets.assignments.iter().enumerate() {
        let row = match *a {
            Assignment::Ignored => continue,
            Assignment::Background => bg_row,
            Assignment::Foreground { class, offsets } => {
                if class >= bg_row {
                    return Err(Error::input(format!("target class {class} has no score row")));
                }
                for j in 0..4 {
                    let (v, g) = smooth_l1(t_s[r][j] - offsets[j], SMOOTH_L1_BETA);
                    loc += loc_scale * v;
                    grad_offsets[r][j] = loc_scale * g;
                }
                class
            }
        };
        let p = phi_s.get(row, r);
        if !p.is_finite() || p < 0.0 {
            return Err(Error::numerical(format!("proposal {r}: score {p} is not a probability")));
        }
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        cls -= cls_scale * p.ln();
        grad_scores[[row, r]] = -cls_scale / p;
    }

    Ok(SlvLoss {
        loss: cls + loc,
        cls,
        loc,
        grad_scores,
        grad_offsets,
        vacuous: false,
    })
}

/// Shape of the loss-weight ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    Linear,
    /// Weight pinned at zero; the multi-task branch never trains.
    Off,
}

/// Iteration-dependent weight of the multi-task loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossWeightSchedule {
    pub ramp_length: u64,
    pub shape: RampShape,
}

impl LossWeightSchedule {
    pub fn linear(ramp_length: u64) -> Result<Self> {
        let s = Self {
            ramp_length,
            shape: RampShape::Linear,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn off() -> Self {
        Self {
            ramp_length: u64::MAX,
            shape: RampShape::Off,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape == RampShape::Linear && self.ramp_length == 0 {
            return Err(Error::config("loss-weight ramp length must be positive"));
        }
        Ok(())
    }

    /// `min(i / ramp_length, 1)` for the linear ramp.
    pub fn weight(&self, iteration: u64) -> f64 {
        match self.shape {
            RampShape::Off => 0.0,
            RampShape::Linear => {
                if iteration >= self.ramp_length {
                    1.0
                } else {
                    iteration as f64 / self.ramp_length as f64
                }
            }
        }
    }
}

/// `l_w + sum(l_r) + w_s * l_s`.
pub fn total_loss(l_w: f64, l_r: &[f64], l_s: f64, w_s: f64) -> f64 {
    l_w + l_r.iter().sum::<f64>() + w_s * l_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::{softmax_over_classes, ScoreKind};
    use crate::voting::ClassBoxes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sup(class: usize, boxes: Vec<BBox>) -> Supervision {
        Supervision {
            classes: vec![ClassBoxes { class, boxes }],
        }
    }

    #[test]
    fn assign_examples() {
        let g = bx(10, 10, 30, 30);
        let t = assign_targets(&[g], &sup(2, vec![g]), 0.5, (0.1, 0.5)).unwrap();
        assert_eq!(
            t.assignments,
            vec![Assignment::Foreground {
                class: 2,
                offsets: [0.0; 4]
            }]
        );

        // 20x20 proposal vs 20x20 target offset by 10 in x and 0 in y:
        // 200 / 600 = 1/3.
        let p = bx(20, 10, 40, 30);
        assert!((iou(&p, &g) - 1.0 / 3.0).abs() < 1e-12);
        let t = assign_targets(&[p], &sup(0, vec![g]), 0.5, (0.1, 0.5)).unwrap();
        assert_eq!(t.assignments, vec![Assignment::Background]);

        let far = bx(60, 60, 70, 70);
        let t = assign_targets(&[far], &sup(0, vec![g]), 0.5, (0.1, 0.5)).unwrap();
        assert_eq!(t.assignments, vec![Assignment::Ignored]);

        let t = assign_targets(&[g, p], &Supervision::default(), 0.5, (0.1, 0.5)).unwrap();
        assert!(t.assignments.iter().all(|a| *a == Assignment::Ignored));
    }

    #[test]
    fn assign_rejects_overlapping_bands() {
        assert!(assign_targets(&[], &Supervision::default(), 0.4, (0.1, 0.5)).is_err());
        assert!(assign_targets(&[], &Supervision::default(), 0.5, (0.6, 0.5)).is_err());
        assert!(assign_targets(&[], &Supervision::default(), 0.5, (0.1, 0.5)).is_ok());
    }

    #[test]
    fn encode_examples() {
        let p = bx(10, 20, 30, 60);
        assert_eq!(encode_offsets(&p, &p), [0.0; 4]);
        assert_eq!(encode_offsets(&p, &bx(30, 20, 50, 60)), [1.0, 0.0, 0.0, 0.0]);
        // Width scaled by e about the same centre: exact only up to pixel
        // rounding, so check against the reals directly.
        let t = [0.0, 0.0, 1.0, 0.0];
        let r = decode_offsets_exact(&p, &t);
        let (pcx, _, pw, _) = p.center_size();
        assert!((r[2] - r[0] - pw * std::f64::consts::E).abs() < 1e-12);
        assert!(((r[0] + r[2]) / 2.0 - pcx).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        let p = bx(10, 20, 30, 60);
        assert_eq!(decode_offsets(&p, &[0.0; 4], 100, 100).unwrap(), p);
        // Shift right by two widths: x range 50..70 clipped to 64.
        assert_eq!(decode_offsets(&p, &[2.0, 0.0, 0.0, 0.0], 100, 64).unwrap(), bx(50, 20, 64, 60));
        assert!(matches!(
            decode_offsets(&p, &[10.0, 0.0, 0.0, 0.0], 100, 100),
            Err(Error::EmptyBox)
        ));
        assert!(decode_offsets(&p, &[f64::NAN, 0.0, 0.0, 0.0], 100, 100).is_err());
    }

    #[test]
    fn slv_loss_perfect_prediction() {
        let g = bx(0, 0, 10, 10);
        let targets = assign_targets(&[g, bx(9, 9, 19, 19)], &sup(0, vec![g]), 0.5, (0.0, 0.5)).unwrap();
        assert_eq!(targets.assignments[1], Assignment::Background);
        let phi = ScoreMatrix::new(ndarray::array![[1.0, 0.0], [0.0, 1.0]], ScoreKind::ClassNormalized).unwrap();
        let l = slv_loss(&phi, &[[0.0; 4]; 2], &targets).unwrap();
        assert!(l.loss < 1e-7);
        assert_eq!(l.loc, 0.0);
    }

    #[test]
    fn slv_loss_smooth_l1_quadratic_region() {
        let targets = ProposalTargets {
            assignments: vec![Assignment::Foreground {
                class: 0,
                offsets: [0.0; 4],
            }],
        };
        let phi = ScoreMatrix::new(ndarray::array![[1.0], [0.0]], ScoreKind::ClassNormalized).unwrap();
        let l = slv_loss(&phi, &[[0.5; 4]], &targets).unwrap();
        assert!((l.loc - 0.125).abs() < 1e-15);
    }

    #[test]
    fn slv_loss_vacuous() {
        let targets = ProposalTargets {
            assignments: vec![Assignment::Ignored; 2],
        };
        let phi = ScoreMatrix::new(ndarray::array![[0.5, 0.5], [0.5, 0.5]], ScoreKind::ClassNormalized).unwrap();
        let l = slv_loss(&phi, &[[0.3; 4]; 2], &targets).unwrap();
        assert!(l.vacuous);
        assert_eq!(l.loss, 0.0);
        assert!(l.grad_scores.iter().all(|&g| g == 0.0));
    }

    fn random_targets(rng: &mut ChaCha8Rng, c: usize, r: usize) -> ProposalTargets {
        ProposalTargets {
            assignments: (0..r)
                .map(|_| match rng.random_range(0..3) {
                    0 => Assignment::Ignored,
                    1 => Assignment::Background,
                    _ => Assignment::Foreground {
                        class: rng.random_range(0..c),
                        offsets: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                    },
                })
                .collect(),
        }
    }

    /// Offsets whose residual to the target stays at least 0.05 away from the
    /// smooth-L1 kink at |x| = 1.
    fn offsets_away_from_kink(rng: &mut ChaCha8Rng, targets: &ProposalTargets) -> Vec<Offsets> {
        targets
            .assignments
            .iter()
            .map(|a| {
                let base = match a {
                    Assignment::Foreground { offsets, .. } => *offsets,
                    _ => [0.0; 4],
                };
                std::array::from_fn(|j| {
                    let mag = if rng.random_bool(0.5) {
                        rng.random_range(0.0..0.95)
                    } else {
                        rng.random_range(1.05..2.0)
                    };
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    base[j] + sign * mag
                })
            })
            .collect()
    }

    #[test]
    fn slv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 1e-5;
        for _ in 0..100 {
            let c = rng.random_range(1..=4);
            let r = rng.random_range(1..=8);
            let logits = Array2::from_shape_fn((c + 1, r), |_| rng.random_range(-2.0..2.0));
            let phi = softmax_over_classes(&ScoreMatrix::logits(logits).unwrap()).unwrap();
            let targets = random_targets(&mut rng, c, r);
            let t_s = offsets_away_from_kink(&mut rng, &targets);
            let l = slv_loss(&phi, &t_s, &targets).unwrap();

            let eval = |vals: &Array2<f64>, t: &[Offsets]| {
                let m = ScoreMatrix::new(vals.clone(), ScoreKind::Probabilities).unwrap();
                slv_loss(&m, t, &targets).unwrap().loss
            };
            let mut vals = phi.values().clone();
            for idx in 0..vals.len() {
                let (i, j) = (idx / r, idx % r);
                let x = vals[[i, j]];
                vals[[i, j]] = x + h;
                let up = eval(&vals, &t_s);
                vals[[i, j]] = x - h;
                let down = eval(&vals, &t_s);
                vals[[i, j]] = x;
                let num = (up - down) / (2.0 * h);
                let ana = l.grad_scores[[i, j]];
                assert!((ana - num).abs() <= 1e-5 * ana.abs().max(num.abs()).max(1e-8), "{ana} vs {num}");
            }
            let mut t = t_s.clone();
            for p in 0..r {
                for j in 0..4 {
                    let x = t[p][j];
                    t[p][j] = x + h;
                    let up = eval(phi.values(), &t);
                    t[p][j] = x - h;
                    let down = eval(phi.values(), &t);
                    t[p][j] = x;
                    let num = (up - down) / (2.0 * h);
                    let ana = l.grad_offsets[p][j];
                    assert!((ana - num).abs() <= 1e-5 * ana.abs().max(num.abs()).max(1e-8), "{ana} vs {num}");
                }
            }
        }
    }

    #[test]
    fn schedule_examples() {
        let s = LossWeightSchedule::linear(100).unwrap();
        assert_eq!(s.weight(0), 0.0);
        assert_eq!(s.weight(50), 0.5);
        assert_eq!(s.weight(100), 1.0);
        assert_eq!(s.weight(1000), 1.0);
        assert!(LossWeightSchedule::linear(0).is_err());
        assert_eq!(LossWeightSchedule::off().weight(u64::MAX), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, &[1.0, 1.0, 1.0], 2.0, 0.5), 5.0);
        assert_eq!(total_loss(0.0, &[0.0; 3], 0.0, 0.0), 0.0);
        assert_eq!(total_loss(0.7, &[0.1, 0.2, 0.3], 9.0, 0.0), 0.7 + 0.1 + 0.2 + 0.3);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..200, 0u32..200, 1u32..150, 1u32..150).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn codec_round_trip(p in arb_box(), g in arb_box()) {
            let r = decode_offsets_exact(&p, &encode_offsets(&p, &g));
            let want = [g.x0(), g.y0(), g.x1(), g.y1()].map(f64::from);
            for j in 0..4 {
                prop_assert!((r[j] - want[j]).abs() < 1e-9);
            }
            prop_assert_eq!(decode_offsets(&p, &encode_offsets(&p, &g), 400, 400).unwrap(), g);
        }
    }

    proptest! {
        #[test]
        fn schedule_monotone(len in 1u64..10_000, a in 0u64..20_000, b in 0u64..20_000) {
            let s = LossWeightSchedule::linear(len).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.weight(lo) <= s.weight(hi));
            prop_assert!((0.0..=1.0).contains(&s.weight(a)));
        }

        #[test]
        fn total_loss_linear_in_slv_term(lw in 0.0f64..5.0, lr in proptest::array::uniform3(0.0f64..5.0), ls in 0.0f64..5.0, ws in 0.0f64..1.0, d in 0.0f64..3.0) {
            let base = total_loss(lw, &lr, ls, ws);
            let bumped = total_loss(lw, &lr, ls + d, ws);
            prop_assert!((bumped - base - ws * d).abs() < 1e-12);
            prop_assert!(total_loss(lw + d, &lr, ls, ws) >= base);
        }
    }
}

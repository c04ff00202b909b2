//! Mini-Bongard problems: 14 panels where indices 0..=6 satisfy a concept
//! rule (six primary panels plus the positive test panel) and indices 7..=13
//! violate it (six auxiliary panels plus the negative test panel).
//!
//! Four concept families are used: SHAPE (a target shape kind is present),
//! COUNT (an exact shape count), COMBO (count and kind jointly), and
//! SYMMETRY (pixel-exact mirror symmetry). All are checkable from pixels via
//! the template decoder, and deliberately conflict with each other at the
//! pixel level: a panel that is rule-satisfying for one family is usually
//! rule-violating for some instance of another.

use serde::{Deserialize, Serialize};

use super::shapes::{decode, render, Geometry, Panel, ShapeKind, ShapeSpec};
use super::GenError;
use crate::rng::Stream;

pub const BONGARD_PANEL_SIDE: usize = 64;
const MAX_RETRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ConceptFamily {
    Shape,
    Count,
    Combo,
    Symmetry,
}

impl ConceptFamily {
    pub const ALL: [ConceptFamily; 4] = [
        ConceptFamily::Shape,
        ConceptFamily::Count,
        ConceptFamily::Combo,
        ConceptFamily::Symmetry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConceptFamily::Shape => "shape",
            ConceptFamily::Count => "count",
            ConceptFamily::Combo => "combo",
            ConceptFamily::Symmetry => "symmetry",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// A concrete rule instance of one family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConceptParams {
    Shape { target: ShapeKind },
    Count { n: u8 },
    Combo { target: ShapeKind, n: u8 },
    Symmetry,
}

impl ConceptParams {
    pub fn family(&self) -> ConceptFamily {
        match self {
            ConceptParams::Shape { .. } => ConceptFamily::Shape,
            ConceptParams::Count { .. } => ConceptFamily::Count,
            ConceptParams::Combo { .. } => ConceptFamily::Combo,
            ConceptParams::Symmetry => ConceptFamily::Symmetry,
        }
    }

    /// Pixel-level rule check. `None` when the panel does not decode.
    pub fn satisfied_by(&self, panel: &Panel, geom: &Geometry) -> Option<bool> {
        if let ConceptParams::Symmetry = self {
            return Some(panel.is_mirror_symmetric());
        }
        let shapes = decode(panel, geom).ok()?;
        Some(match *self {
            ConceptParams::Shape { target } => shapes.iter().any(|s| s.kind == target),
            ConceptParams::Count { n } => shapes.len() == n as usize,
            ConceptParams::Combo { target, n } => {
                shapes.len() == n as usize && shapes.iter().all(|s| s.kind == target)
            }
            ConceptParams::Symmetry => unreachable!(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBongardProblem {
    pub id: u64,
    pub concept: ConceptFamily,
    pub params: ConceptParams,
    /// 14 panels; 0..=6 rule-satisfying, 7..=13 rule-violating.
    pub panels: Vec<Panel>,
}

impl MiniBongardProblem {
    pub fn panel_side(&self) -> usize {
        self.panels[0].h
    }
}

/// Placement grid for multi-shape panels.
struct Layout {
    h: usize,
    w: usize,
    cells: [(f64, f64); 4],
    jitter: i64,
}

impl Layout {
    fn new(side: usize) -> Self {
        let q = side as f64 / 4.0;
        Self {
            h: side,
            w: side,
            cells: [
                (q, q),
                (3.0 * q, q),
                (q, 3.0 * q),
                (3.0 * q, 3.0 * q),
            ],
            jitter: (side / 16) as i64,
        }
    }

    fn axis(&self) -> f64 {
        (self.w as f64 - 1.0) / 2.0
    }
}

fn sample_shape(rng: &mut Stream, geom: &Geometry, pool: &[ShapeKind], cx: f64, cy: f64) -> ShapeSpec {
    let kind = *rng.choose(pool);
    let size = rng.range_inclusive(1, geom.size_values() as i64) as u8;
    let shade = rng.range_inclusive(1, 5) as u8;
    ShapeSpec {
        kind,
        r: geom.radius(size),
        shade: super::shapes::shade_byte(shade),
        cx,
        cy,
    }
}

/// Generic panel: `count` shapes in distinct grid cells with integer jitter.
/// The first shape's kind can be forced.
fn sample_panel(
    rng: &mut Stream,
    layout: &Layout,
    geom: &Geometry,
    count: usize,
    pool: &[ShapeKind],
    force_first: Option<ShapeKind>,
) -> Vec<ShapeSpec> {
    let mut cell_order: Vec<usize> = (0..4).collect();
    rng.shuffle(&mut cell_order);
    let mut shapes = Vec::with_capacity(count);
    for (i, &cell) in cell_order.iter().take(count).enumerate() {
        let (cx0, cy0) = layout.cells[cell];
        let cx = cx0 + rng.range_inclusive(-layout.jitter, layout.jitter) as f64;
        let cy = cy0 + rng.range_inclusive(-layout.jitter, layout.jitter) as f64;
        let mut s = sample_shape(rng, geom, pool, cx, cy);
        if i == 0 {
            if let Some(kind) = force_first {
                s.kind = kind;
            }
        }
        shapes.push(s);
    }
    shapes
}

/// Mirror-symmetric panel by construction: axis-centered singles or mirrored
/// pairs, one per grid row.
fn sample_symmetric_panel(rng: &mut Stream, layout: &Layout, geom: &Geometry) -> Vec<ShapeSpec> {
    let rows = [layout.h as f64 / 4.0, 3.0 * layout.h as f64 / 4.0];
    let n_rows = 1 + rng.below(2);
    let mut row_order = vec![0usize, 1];
    rng.shuffle(&mut row_order);
    let pairs = rng.below(2) == 1;
    let mut shapes = Vec::new();
    for &row in row_order.iter().take(n_rows) {
        let cy = rows[row] + rng.range_inclusive(-layout.jitter, layout.jitter) as f64;
        if pairs {
            let size = rng.range_inclusive(1, geom.size_values() as i64) as u8;
            let r = geom.radius(size);
            // Keep the pair clear of the mirror axis and the left border.
            let lo = (r + 1.0).ceil() as i64;
            let hi = (layout.axis() - 2.0 - r).floor() as i64;
            let cx = rng.range_inclusive(lo, hi) as f64;
            let kind = *rng.choose(&ShapeKind::ALL);
            let shade = super::shapes::shade_byte(rng.range_inclusive(1, 5) as u8);
            shapes.push(ShapeSpec { kind, r, shade, cx, cy });
            shapes.push(ShapeSpec {
                kind,
                r,
                shade,
                cx: layout.w as f64 - 1.0 - cx,
                cy,
            });
        } else {
            let mut s = sample_shape(rng, geom, &ShapeKind::ALL, layout.axis(), cy);
            s.cx = layout.axis();
            shapes.push(s);
        }
    }
    shapes
}

fn other_kinds(target: ShapeKind) -> Vec<ShapeKind> {
    ShapeKind::ALL.into_iter().filter(|k| *k != target).collect()
}

fn other_count(rng: &mut Stream, n: u8) -> usize {
    let choices: Vec<usize> = (1..=4usize).filter(|&c| c != n as usize).collect();
    *rng.choose(&choices)
}

/// Renders a satisfying or violating panel for the given rule instance. The
/// caller re-checks the result; violations here are violations by
/// construction.
fn sample_role_panel(
    rng: &mut Stream,
    layout: &Layout,
    geom: &Geometry,
    params: ConceptParams,
    satisfying: bool,
) -> Panel {
    let shapes = match (params, satisfying) {
        (ConceptParams::Shape { target }, true) => {
            let count = 1 + rng.below(4);
            sample_panel(rng, layout, geom, count, &ShapeKind::ALL, Some(target))
        }
        (ConceptParams::Shape { target }, false) => {
            let count = 1 + rng.below(4);
            sample_panel(rng, layout, geom, count, &other_kinds(target), None)
        }
        (ConceptParams::Count { n }, true) => {
            sample_panel(rng, layout, geom, n as usize, &ShapeKind::ALL, None)
        }
        (ConceptParams::Count { n }, false) => {
            let count = other_count(rng, n);
            sample_panel(rng, layout, geom, count, &ShapeKind::ALL, None)
        }
        (ConceptParams::Combo { target, n }, true) => {
            sample_panel(rng, layout, geom, n as usize, &[target], None)
        }
        (ConceptParams::Combo { target, n }, false) => match rng.below(3) {
            // Wrong count, right kind.
            0 => {
                let count = other_count(rng, n);
                sample_panel(rng, layout, geom, count, &[target], None)
            }
            // Right count, at least one wrong kind.
            1 => {
                let wrong = *rng.choose(&other_kinds(target));
                sample_panel(rng, layout, geom, n as usize, &ShapeKind::ALL, Some(wrong))
            }
            // Wrong count, mixed kinds.
            _ => {
                let count = other_count(rng, n);
                let wrong = *rng.choose(&other_kinds(target));
                sample_panel(rng, layout, geom, count, &ShapeKind::ALL, Some(wrong))
            }
        },
        (ConceptParams::Symmetry, true) => sample_symmetric_panel(rng, layout, geom),
        (ConceptParams::Symmetry, false) => {
            let count = 1 + rng.below(4);
            sample_panel(rng, layout, geom, count, &ShapeKind::ALL, None)
        }
    };
    render(layout.h, layout.w, &shapes)
}

fn sample_params(rng: &mut Stream, family: ConceptFamily) -> ConceptParams {
    match family {
        ConceptFamily::Shape => ConceptParams::Shape {
            target: *rng.choose(&ShapeKind::ALL),
        },
        ConceptFamily::Count => ConceptParams::Count {
            n: rng.range_inclusive(1, 4) as u8,
        },
        ConceptFamily::Combo => ConceptParams::Combo {
            target: *rng.choose(&ShapeKind::ALL),
            n: rng.range_inclusive(1, 4) as u8,
        },
        ConceptFamily::Symmetry => ConceptParams::Symmetry,
    }
}

fn gen_problem(
    seed: u64,
    family: ConceptFamily,
    index: u64,
    side: usize,
) -> Result<MiniBongardProblem, GenError> {
    let mut rng = Stream::substream(seed, &format!("bongard/{}", family.name()), index);
    let layout = Layout::new(side);
    let geom = Geometry::bongard(side);
    for _ in 0..4 {
        let params = sample_params(&mut rng, family);
        let mut panels = Vec::with_capacity(14);
        let mut ok = true;
        for role_sat in [true, false] {
            for _ in 0..7 {
                let mut accepted = None;
                for _ in 0..MAX_RETRIES {
                    let panel = sample_role_panel(&mut rng, &layout, &geom, params, role_sat);
                    if params.satisfied_by(&panel, &geom) == Some(role_sat) {
                        accepted = Some(panel);
                        break;
                    }
                }
                match accepted {
                    Some(p) => panels.push(p),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                break;
            }
        }
        if !ok {
            continue;
        }
        let problem = MiniBongardProblem {
            id: index,
            concept: family,
            params,
            panels,
        };
        if bongard_oracle(&problem) {
            return Ok(problem);
        }
    }
    Err(GenError::Exhausted {
        what: format!("mini-bongard problem (concept {})", family.name()),
        index,
    })
}

/// Generates `count` problems of one concept family.
pub fn gen_bongard(
    seed: u64,
    family: ConceptFamily,
    count: usize,
    side: usize,
) -> Result<Vec<MiniBongardProblem>, GenError> {
    if count == 0 {
        return Err(GenError::EmptyRequest);
    }
    (0..count as u64)
        .map(|i| gen_problem(seed, family, i, side))
        .collect()
}

/// Mixture dataset interleaving all four families round-robin.
pub fn gen_bongard_mixture(
    seed: u64,
    count: usize,
    side: usize,
) -> Result<Vec<MiniBongardProblem>, GenError> {
    if count == 0 {
        return Err(GenError::EmptyRequest);
    }
    (0..count as u64)
        .map(|i| {
            let family = ConceptFamily::ALL[(i % 4) as usize];
            let mut p = gen_problem(seed, family, i, side)?;
            p.id = i;
            Ok(p)
        })
        .collect()
}

/// Role/rule validation from pixels: panels 0..=6 satisfy the problem's rule
/// instance, panels 7..=13 violate it. Malformed problems return false.
pub fn bongard_oracle(p: &MiniBongardProblem) -> bool {
    if p.panels.len() != 14 || p.params.family() != p.concept {
        return false;
    }
    let geom = Geometry::bongard(p.panel_side());
    for (j, panel) in p.panels.iter().enumerate() {
        let want = j < 7;
        match p.params.satisfied_by(panel, &geom) {
            Some(sat) if sat == want => {}
            _ => return false,
        }
    }
    true
}

/// Single-field corruptions that must flip the oracle to false: a
/// rule-satisfying panel swapped with a rule-violating one.
pub fn bongard_mutations(p: &MiniBongardProblem) -> Vec<MiniBongardProblem> {
    [(2usize, 9usize), (6, 13)]
        .into_iter()
        .map(|(a, b)| {
            let mut m = p.clone();
            m.panels.swap(a, b);
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_problems_pass_oracle_all_families() {
        for family in ConceptFamily::ALL {
            let problems = gen_bongard(0, family, 4, BONGARD_PANEL_SIDE).unwrap();
            for p in &problems {
                assert!(bongard_oracle(p), "{family:?} id {}", p.id);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_bongard(11, ConceptFamily::Combo, 3, 64).unwrap();
        let b = gen_bongard(11, ConceptFamily::Combo, 3, 64).unwrap();
        assert_eq!(a, b);
        let m1 = gen_bongard_mixture(5, 8, 64).unwrap();
        let m2 = gen_bongard_mixture(5, 8, 64).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn mixture_interleaves_families() {
        let problems = gen_bongard_mixture(3, 8, 64).unwrap();
        let families: Vec<ConceptFamily> = problems.iter().map(|p| p.concept).collect();
        assert_eq!(&families[..4], &ConceptFamily::ALL);
        assert_eq!(&families[4..], &ConceptFamily::ALL);
    }

    #[test]
    fn mutations_flip_oracle() {
        for family in ConceptFamily::ALL {
            let problems = gen_bongard(7, family, 3, BONGARD_PANEL_SIDE).unwrap();
            for p in &problems {
                for m in bongard_mutations(p) {
                    assert!(!bongard_oracle(&m), "{family:?} id {}", p.id);
                }
            }
        }
    }

    #[test]
    fn shape_problems_share_a_common_target() {
        // Every rule-satisfying panel of a SHAPE problem contains the target;
        // every rule-violating panel lacks it.
        let problems = gen_bongard(2, ConceptFamily::Shape, 5, 64).unwrap();
        let geom = Geometry::bongard(64);
        for p in &problems {
            let ConceptParams::Shape { target } = p.params else {
                panic!("wrong params")
            };
            for (j, panel) in p.panels.iter().enumerate() {
                let has = decode(panel, &geom)
                    .unwrap()
                    .iter()
                    .any(|s| s.kind == target);
                assert_eq!(has, j < 7);
            }
        }
    }

    #[test]
    fn small_panels_also_generate() {
        for family in ConceptFamily::ALL {
            let problems = gen_bongard(1, family, 2, 32).unwrap();
            for p in &problems {
                assert!(bongard_oracle(p));
                assert_eq!(p.panel_side(), 32);
            }
        }
    }

    #[test]
    fn concept_conflict_exists_across_families() {
        // Some generated rule-satisfying panel of one family is
        // rule-violating for an instance of another family.
        let problems = gen_bongard_mixture(4, 16, 64).unwrap();
        let geom = Geometry::bongard(64);
        let mut found = false;
        'outer: for p in &problems {
            for panel in &p.panels[..7] {
                for family in ConceptFamily::ALL {
                    if family == p.concept {
                        continue;
                    }
                    for alt in instances_of(family) {
                        if alt.satisfied_by(panel, &geom) == Some(false) {
                            found = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        assert!(found);
    }

    fn instances_of(family: ConceptFamily) -> Vec<ConceptParams> {
        match family {
            ConceptFamily::Shape => ShapeKind::ALL
                .into_iter()
                .map(|k| ConceptParams::Shape { target: k })
                .collect(),
            ConceptFamily::Count => (1..=4).map(|n| ConceptParams::Count { n }).collect(),
            ConceptFamily::Combo => ShapeKind::ALL
                .into_iter()
                .flat_map(|k| (1..=4).map(move |n| ConceptParams::Combo { target: k, n }))
                .collect(),
            ConceptFamily::Symmetry => vec![ConceptParams::Symmetry],
        }
    }
}

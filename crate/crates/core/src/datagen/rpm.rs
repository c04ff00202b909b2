//! Mini-RPM problems: a 3x3 panel matrix with the bottom-right cell missing,
//! eight candidate options, and row-wise rules over discrete attributes.
//!
//! Three attributes (shade, shape, size, each valued 1..=5) describe every
//! panel. Two of them are governed by rules recorded in [`RuleMetadata`]; the
//! remaining attribute is a distractor sampled independently per panel. The
//! full attribute value grids are kept on the problem so the oracle can check
//! rules exhaustively, and they are reconstructed from pixels on read.

use serde::{Deserialize, Serialize};

use super::shapes::{decode, render, Geometry, Panel, ShapeKind, ShapeSpec};
use super::GenError;
use crate::rng::Stream;

pub const RPM_PANEL_SIDE: usize = 32;
const MAX_RETRIES: usize = 64;

/// Panel attributes in canonical (alphabetical) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Shade,
    Shape,
    Size,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Shade, Attribute::Shape, Attribute::Size];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shade => "shade",
            Attribute::Shape => "shape",
            Attribute::Size => "size",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Attribute::Shade => 0,
            Attribute::Shape => 1,
            Attribute::Size => 2,
        }
    }
}

/// Row-wise progression rules over attribute values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Constant,
    ProgPlus,
    ProgMinus,
    DistributeThree,
}

impl Rule {
    pub const ALL: [Rule; 4] = [
        Rule::Constant,
        Rule::ProgPlus,
        Rule::ProgMinus,
        Rule::DistributeThree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Constant => "constant",
            Rule::ProgPlus => "prog_plus",
            Rule::ProgMinus => "prog_minus",
            Rule::DistributeThree => "distribute_three",
        }
    }

    /// Does one row satisfy this rule? For distribute-three the required
    /// value set is supplied by the first row of the grid.
    fn row_holds(self, row: [u8; 3], dist_set: &[u8; 3]) -> bool {
        match self {
            Rule::Constant => row[0] == row[1] && row[1] == row[2],
            Rule::ProgPlus => row[1] == row[0] + 1 && row[2] == row[1] + 1,
            Rule::ProgMinus => row[0] == row[1] + 1 && row[1] == row[2] + 1,
            Rule::DistributeThree => {
                let mut sorted = row;
                sorted.sort_unstable();
                let mut want = *dist_set;
                want.sort_unstable();
                sorted == want && row[0] != row[1] && row[1] != row[2] && row[0] != row[2]
            }
        }
    }

    /// Does the full 3x3 grid satisfy this rule on every row?
    pub fn grid_holds(self, grid: &[[u8; 3]; 3]) -> bool {
        let dist_set = grid[0];
        if self == Rule::DistributeThree {
            let mut s = dist_set;
            s.sort_unstable();
            if s[0] == s[1] || s[1] == s[2] {
                return false;
            }
        }
        grid.iter().all(|&row| self.row_holds(row, &dist_set))
    }
}

/// The governed (attribute, rule) pairs plus the free distractor attribute.
///
/// The rule list is kept sorted by attribute name; that canonical order is
/// what aligns rules with constrained concept slots and codebook targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMetadata {
    pub rules: Vec<(Attribute, Rule)>,
    pub distractor: Attribute,
}

impl RuleMetadata {
    pub fn new(mut rules: Vec<(Attribute, Rule)>, distractor: Attribute) -> Self {
        rules.sort_by_key(|(a, _)| *a);
        Self { rules, distractor }
    }

    /// "attribute:rule" strings in canonical order.
    pub fn descriptors(&self) -> Vec<String> {
        self.rules
            .iter()
            .map(|(a, r)| format!("{}:{}", a.name(), r.name()))
            .collect()
    }

    pub fn governs(&self, attr: Attribute) -> Option<Rule> {
        self.rules
            .iter()
            .find(|(a, _)| *a == attr)
            .map(|(_, r)| *r)
    }

    pub fn contains_pair(&self, attr: Attribute, rule: Rule) -> bool {
        self.rules.contains(&(attr, rule))
    }
}

/// Train/test generalization regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Same distribution everywhere.
    Iid,
    /// Train panels only use attribute values {1,3,5}; test panels {2,4}.
    /// Rules are restricted to `constant` so the value split is exact.
    Interpolation,
    /// The (shade, prog_plus) pair never appears in train metadata and is
    /// present in every test problem's metadata.
    HeldoutPair,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Iid => "iid",
            Regime::Interpolation => "interpolation",
            Regime::HeldoutPair => "heldout_pair",
        }
    }
}

/// Dataset split; `Val` always follows the train-side distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn test_side(self) -> bool {
        matches!(self, Split::Test)
    }
}

/// One mini-RPM problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniRpmProblem {
    pub id: u64,
    /// The eight visible matrix cells, row-major, cell (3,3) missing.
    pub context: Vec<Panel>,
    /// Eight candidate panels for the missing cell.
    pub options: Vec<Panel>,
    pub answer: usize,
    pub meta: RuleMetadata,
    /// Attribute value grids indexed by [`Attribute::index`]; grids[a][row][col].
    pub grids: [[[u8; 3]; 3]; 3],
    /// Attribute value triples (canonical order) for each option.
    pub option_values: Vec<[u8; 3]>,
}

fn render_cell(values: [u8; 3]) -> Panel {
    let geom = Geometry::rpm();
    let kind = ShapeKind::from_value(values[Attribute::Shape.index()]).expect("shape value");
    let spec = ShapeSpec {
        kind,
        r: geom.radius(values[Attribute::Size.index()]),
        shade: super::shapes::shade_byte(values[Attribute::Shade.index()]),
        cx: (RPM_PANEL_SIDE as f64 - 1.0) / 2.0,
        cy: (RPM_PANEL_SIDE as f64 - 1.0) / 2.0,
    };
    render(RPM_PANEL_SIDE, RPM_PANEL_SIDE, &[spec])
}

fn value_domain(regime: Regime, test_side: bool) -> &'static [u8] {
    match (regime, test_side) {
        (Regime::Interpolation, false) => &[1, 3, 5],
        (Regime::Interpolation, true) => &[2, 4],
        _ => &[1, 2, 3, 4, 5],
    }
}

fn rule_pool(regime: Regime) -> &'static [Rule] {
    match regime {
        // Progressions and distribute-three cannot stay inside a 2-3 value
        // parity domain, so the interpolation regime is constant-only.
        Regime::Interpolation => &[Rule::Constant],
        _ => &Rule::ALL,
    }
}

fn sample_meta(rng: &mut Stream, regime: Regime, test_side: bool) -> RuleMetadata {
    loop {
        let mut attrs = Attribute::ALL.to_vec();
        rng.shuffle(&mut attrs);
        let governed = [attrs[0], attrs[1]];
        let distractor = attrs[2];
        let pool = rule_pool(regime);
        let mut rules: Vec<(Attribute, Rule)> = governed
            .iter()
            .map(|&a| (a, *rng.choose(pool)))
            .collect();
        if regime == Regime::HeldoutPair {
            if test_side {
                // Force the held-out pair in, keep the other slot random.
                let other = if governed[0] == Attribute::Shade {
                    governed[1]
                } else {
                    governed[0]
                };
                if other == Attribute::Shade {
                    // Both slots cannot be shade; resample.
                    continue;
                }
                rules = vec![
                    (Attribute::Shade, Rule::ProgPlus),
                    (other, *rng.choose(&Rule::ALL)),
                ];
                let distractor = Attribute::ALL
                    .into_iter()
                    .find(|a| *a != Attribute::Shade && *a != other)
                    .expect("three attributes");
                return RuleMetadata::new(rules, distractor);
            }
            let meta = RuleMetadata::new(rules, distractor);
            if meta.contains_pair(Attribute::Shade, Rule::ProgPlus) {
                continue;
            }
            return meta;
        }
        return RuleMetadata::new(rules, distractor);
    }
}

fn sample_rule_grid(rng: &mut Stream, rule: Rule, domain: &[u8]) -> [[u8; 3]; 3] {
    match rule {
        Rule::Constant => {
            let mut grid = [[0u8; 3]; 3];
            for row in &mut grid {
                let a = *rng.choose(domain);
                *row = [a, a, a];
            }
            grid
        }
        Rule::ProgPlus => {
            let mut grid = [[0u8; 3]; 3];
            for row in &mut grid {
                let a = rng.range_inclusive(1, 3) as u8;
                *row = [a, a + 1, a + 2];
            }
            grid
        }
        Rule::ProgMinus => {
            let mut grid = [[0u8; 3]; 3];
            for row in &mut grid {
                let a = rng.range_inclusive(3, 5) as u8;
                *row = [a, a - 1, a - 2];
            }
            grid
        }
        Rule::DistributeThree => {
            let mut values = domain.to_vec();
            rng.shuffle(&mut values);
            let set = [values[0], values[1], values[2]];
            let mut first = set;
            rng.shuffle(&mut first);
            [
                first,
                [first[1], first[2], first[0]],
                [first[2], first[0], first[1]],
            ]
        }
    }
}

fn cell_values(grids: &[[[u8; 3]; 3]; 3], row: usize, col: usize) -> [u8; 3] {
    [
        grids[0][row][col],
        grids[1][row][col],
        grids[2][row][col],
    ]
}

/// Completes the grids with an option's values and checks every rule.
fn option_satisfies(meta: &RuleMetadata, grids: &[[[u8; 3]; 3]; 3], values: [u8; 3]) -> bool {
    meta.rules.iter().all(|(attr, rule)| {
        let mut grid = grids[attr.index()];
        grid[2][2] = values[attr.index()];
        rule.grid_holds(&grid)
    })
}

fn gen_problem(
    seed: u64,
    regime: Regime,
    split: Split,
    index: u64,
) -> Result<MiniRpmProblem, GenError> {
    let mut rng = Stream::substream(seed, &format!("rpm/{}/{}", regime.name(), split.name()), index);
    let domain = value_domain(regime, split.test_side());
    for _ in 0..MAX_RETRIES {
        let meta = sample_meta(&mut rng, regime, split.test_side());
        let mut grids = [[[0u8; 3]; 3]; 3];
        for (attr, rule) in &meta.rules {
            grids[attr.index()] = sample_rule_grid(&mut rng, *rule, domain);
        }
        let d = meta.distractor.index();
        for row in 0..3 {
            for col in 0..3 {
                grids[d][row][col] = *rng.choose(domain);
            }
        }

        let answer_values = cell_values(&grids, 2, 2);
        // Distractors perturb exactly one governed attribute value. With two
        // governed attributes and four alternative values each there are
        // exactly eight candidates; seven are kept.
        let mut candidates: Vec<[u8; 3]> = Vec::with_capacity(8);
        for (attr, _) in &meta.rules {
            for v in 1u8..=5 {
                if v != answer_values[attr.index()] {
                    let mut vals = answer_values;
                    vals[attr.index()] = v;
                    candidates.push(vals);
                }
            }
        }
        rng.shuffle(&mut candidates);
        candidates.truncate(7);

        let mut option_values = vec![answer_values];
        option_values.extend(candidates);
        rng.shuffle(&mut option_values);
        let answer = option_values
            .iter()
            .position(|&v| v == answer_values)
            .expect("answer present");

        // Exhaustive uniqueness check before accepting the draw.
        let unique = option_values
            .iter()
            .enumerate()
            .all(|(i, &v)| option_satisfies(&meta, &grids, v) == (i == answer));
        let distinct = option_values
            .iter()
            .enumerate()
            .all(|(i, a)| option_values[i + 1..].iter().all(|b| a != b));
        if !unique || !distinct {
            continue;
        }

        let context: Vec<Panel> = (0..8)
            .map(|i| render_cell(cell_values(&grids, i / 3, i % 3)))
            .collect();
        let options: Vec<Panel> = option_values.iter().map(|&v| render_cell(v)).collect();
        return Ok(MiniRpmProblem {
            id: index,
            context,
            options,
            answer,
            meta,
            grids,
            option_values,
        });
    }
    Err(GenError::Exhausted {
        what: format!("mini-rpm problem (regime {}, split {})", regime.name(), split.name()),
        index,
    })
}

/// Generates `count` problems for one split. Pure in `(seed, index)`, so two
/// calls with the same arguments are byte-identical.
pub fn gen_rpm(
    seed: u64,
    count: usize,
    regime: Regime,
    split: Split,
) -> Result<Vec<MiniRpmProblem>, GenError> {
    if count == 0 {
        return Err(GenError::EmptyRequest);
    }
    (0..count as u64)
        .map(|i| gen_problem(seed, regime, split, i))
        .collect()
}

/// Full pixel-level validation of one problem:
/// - every panel decodes to exactly one shape whose attribute values match
///   the stored grids / option values,
/// - every governed rule holds on the completed grids,
/// - the chosen answer is the only option satisfying all rules,
/// - options are pairwise distinct in attribute space.
pub fn rpm_oracle(p: &MiniRpmProblem) -> bool {
    let geom = Geometry::rpm();
    if p.context.len() != 8 || p.options.len() != 8 || p.answer >= 8 {
        return false;
    }
    let decode_values = |panel: &Panel| -> Option<[u8; 3]> {
        let shapes = decode(panel, &geom).ok()?;
        if shapes.len() != 1 {
            return None;
        }
        let s = &shapes[0];
        Some([s.shade_value, s.kind.value(), s.size_value])
    };
    for (i, panel) in p.context.iter().enumerate() {
        match decode_values(panel) {
            Some(vals) if vals == cell_values(&p.grids, i / 3, i % 3) => {}
            _ => return false,
        }
    }
    for (i, panel) in p.options.iter().enumerate() {
        match decode_values(panel) {
            Some(vals) if vals == p.option_values[i] => {}
            _ => return false,
        }
    }
    if p.option_values[p.answer] != cell_values(&p.grids, 2, 2) {
        return false;
    }
    for (i, &vals) in p.option_values.iter().enumerate() {
        if option_satisfies(&p.meta, &p.grids, vals) != (i == p.answer) {
            return false;
        }
        if p.option_values[i + 1..].contains(&vals) {
            return false;
        }
    }
    // Governed and distractor attributes must be distinct and cover all three.
    let mut attrs: Vec<Attribute> = p.meta.rules.iter().map(|(a, _)| *a).collect();
    attrs.push(p.meta.distractor);
    attrs.sort_unstable();
    attrs.dedup();
    attrs.len() == 3
}

/// Single-field corruptions that must flip the oracle to false.
pub fn rpm_mutations(p: &MiniRpmProblem) -> Vec<MiniRpmProblem> {
    let mut out = Vec::new();

    // Flip one governed rule value in a context cell and re-render it.
    if let Some((attr, _)) = p.meta.rules.first() {
        let mut m = p.clone();
        let a = attr.index();
        let old = m.grids[a][0][1];
        m.grids[a][0][1] = if old == 1 { 2 } else { old - 1 };
        m.context[1] = render_cell(cell_values(&m.grids, 0, 1));
        out.push(m);
    }

    // Swap the answer panel with a distractor without updating the index.
    let other = (p.answer + 1) % 8;
    let mut m = p.clone();
    m.options.swap(p.answer, other);
    m.option_values.swap(p.answer, other);
    out.push(m);

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_problems_pass_oracle() {
        let problems = gen_rpm(0, 20, Regime::Iid, Split::Train).unwrap();
        assert_eq!(problems.len(), 20);
        for p in &problems {
            assert!(rpm_oracle(p), "oracle failed for id {}", p.id);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_rpm(7, 5, Regime::Iid, Split::Train).unwrap();
        let b = gen_rpm(7, 5, Regime::Iid, Split::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rule_row_definitions() {
        assert!(Rule::Constant.grid_holds(&[[2, 2, 2], [4, 4, 4], [1, 1, 1]]));
        assert!(Rule::ProgPlus.grid_holds(&[[2, 3, 4], [1, 2, 3], [3, 4, 5]]));
        assert!(!Rule::ProgPlus.grid_holds(&[[2, 3, 5], [1, 2, 3], [3, 4, 5]]));
        assert!(Rule::ProgMinus.grid_holds(&[[5, 4, 3], [3, 2, 1], [4, 3, 2]]));
        assert!(Rule::DistributeThree.grid_holds(&[[1, 4, 2], [4, 2, 1], [2, 1, 4]]));
        assert!(!Rule::DistributeThree.grid_holds(&[[1, 4, 2], [4, 2, 2], [2, 1, 4]]));
    }

    #[test]
    fn mutations_flip_oracle() {
        let problems = gen_rpm(3, 10, Regime::Iid, Split::Train).unwrap();
        for p in &problems {
            for m in rpm_mutations(p) {
                assert!(!rpm_oracle(&m), "mutation not caught for id {}", p.id);
            }
        }
    }

    #[test]
    fn heldout_pair_split_hygiene() {
        let train = gen_rpm(1, 30, Regime::HeldoutPair, Split::Train).unwrap();
        let test = gen_rpm(1, 30, Regime::HeldoutPair, Split::Test).unwrap();
        for p in &train {
            assert!(!p.meta.contains_pair(Attribute::Shade, Rule::ProgPlus));
        }
        for p in &test {
            assert!(p.meta.contains_pair(Attribute::Shade, Rule::ProgPlus));
            assert!(rpm_oracle(p));
        }
    }

    #[test]
    fn interpolation_split_hygiene() {
        let train = gen_rpm(2, 30, Regime::Interpolation, Split::Train).unwrap();
        let val = gen_rpm(2, 10, Regime::Interpolation, Split::Val).unwrap();
        let test = gen_rpm(2, 30, Regime::Interpolation, Split::Test).unwrap();
        let grid_values = |p: &MiniRpmProblem| -> Vec<u8> {
            let mut v: Vec<u8> = p.grids.iter().flatten().flatten().copied().collect();
            v.extend_from_slice(&p.option_values[p.answer]);
            v
        };
        for p in train.iter().chain(val.iter()) {
            assert!(grid_values(p).iter().all(|v| [1, 3, 5].contains(v)));
            assert!(rpm_oracle(p));
        }
        for p in &test {
            assert!(grid_values(p).iter().all(|v| [2, 4].contains(v)));
            assert!(rpm_oracle(p));
        }
    }

    #[test]
    fn metadata_is_canonically_sorted() {
        let meta = RuleMetadata::new(
            vec![(Attribute::Size, Rule::ProgPlus), (Attribute::Shade, Rule::Constant)],
            Attribute::Shape,
        );
        assert_eq!(meta.rules[0].0, Attribute::Shade);
        assert_eq!(
            meta.descriptors(),
            vec!["shade:constant".to_string(), "size:prog_plus".to_string()]
        );
    }

    #[test]
    fn empty_request_is_an_error() {
        assert!(matches!(
            gen_rpm(0, 0, Regime::Iid, Split::Train),
            Err(GenError::EmptyRequest)
        ));
    }
}

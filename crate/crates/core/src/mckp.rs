//! Bit-width assignment as a multiple-choice knapsack problem.
//!
//! Each weighted layer is a class; each candidate bit-width `b` is an item
//! with weight `params * b` (bits of storage) and profit `-dL[layer][b]`.
//! Exactly one item is picked per class, the total weight must fit the
//! capacity `floor(b_target * total_params)`, and total profit is maximized.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::perturbation::PerturbationTable;

/// Largest `classes * (capacity + 1)` table the DP solver will allocate.
pub const DP_CELL_BUDGET: u128 = 10_000_000;
/// Largest number of combinations the exhaustive solver will visit.
pub const EXHAUSTIVE_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MckpItem {
    pub bit: u32,
    /// `params * bit`
    pub weight: u64,
    /// `-dL`
    pub profit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MckpClass {
    pub name: String,
    pub params: u64,
    /// Ordered by bit-width, so weights strictly increase.
    pub items: Vec<MckpItem>,
}

impl MckpClass {
    /// Builds a class from `(bit, delta_loss)` pairs.
    pub fn from_losses(name: impl Into<String>, params: u64, losses: &[(u32, f64)]) -> Self {
        let mut items: Vec<MckpItem> = losses
            .iter()
            .map(|&(bit, dl)| MckpItem {
                bit,
                weight: params * u64::from(bit),
                profit: -dl,
            })
            .collect();
        items.sort_by_key(|i| i.bit);
        MckpClass {
            name: name.into(),
            params,
            items,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MckpInstance {
    classes: Vec<MckpClass>,
    capacity: u64,
}

impl MckpInstance {
    pub fn new(classes: Vec<MckpClass>, capacity: u64) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Table("knapsack instance has no classes".into()));
        }
        for c in &classes {
            if c.items.is_empty() {
                return Err(Error::Table(format!("class `{}` has no items", c.name)));
            }
            if c.params == 0 {
                return Err(Error::Table(format!("class `{}` has no parameters", c.name)));
            }
            if c.items.windows(2).any(|w| w[0].weight >= w[1].weight || w[0].bit >= w[1].bit) {
                return Err(Error::Table(format!(
                    "class `{}`: item weights must strictly increase with bit-width",
                    c.name
                )));
            }
            if c.items.iter().any(|i| !i.profit.is_finite()) {
                return Err(Error::Table(format!("class `{}` has a non-finite profit", c.name)));
            }
        }
        Ok(MckpInstance { classes, capacity })
    }

    pub fn classes(&self) -> &[MckpClass] {
        &self.classes
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn total_params(&self) -> u64 {
        self.classes.iter().map(|c| c.params).sum()
    }

    /// Weight of picking every class's lightest item.
    pub fn min_weight(&self) -> u64 {
        self.classes.iter().map(|c| c.items[0].weight).sum()
    }

    pub fn max_weight(&self) -> u64 {
        self.classes
            .iter()
            .map(|c| c.items.last().unwrap().weight)
            .sum()
    }

    pub fn check_feasible(&self) -> Result<()> {
        let minimum = self.min_weight();
        if minimum > self.capacity {
            return Err(Error::Infeasible {
                capacity: self.capacity,
                minimum,
            });
        }
        Ok(())
    }

    /// Copy with every profit multiplied by `factor`.
    pub fn scale_profits(&self, factor: f64) -> MckpInstance {
        let mut out = self.clone();
        for c in &mut out.classes {
            for i in &mut c.items {
                i.profit *= factor;
            }
        }
        out
    }
}

/// `floor(b_target * total_params)`, except that a product within a few ulps
/// of an integer snaps to it so decimal targets like `2.3` are not undercut.
pub fn capacity_bits(b_target: f64, total_params: u64) -> u64 {
    let raw = b_target * total_params as f64;
    let near = raw.round();
    if (raw - near).abs() <= 4.0 * f64::EPSILON * raw.abs() {
        near as u64
    } else {
        raw.floor() as u64
    }
}

/// Reformulates a perturbation table as a knapsack instance with capacity
/// `floor(b_target * sum(params))`.
pub fn build_instance(
    table: &PerturbationTable,
    layer_sizes: &HashMap<String, u64>,
    b_target: f64,
) -> Result<MckpInstance> {
    if !(b_target.is_finite() && b_target > 0.0) {
        return Err(Error::Bits(format!("target bit-width {b_target} must be positive")));
    }
    let classes = table
        .layers()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let params = *layer_sizes
                .get(name)
                .ok_or_else(|| Error::Table(format!("no parameter count for layer `{name}`")))?;
            let losses: Vec<(u32, f64)> =
                table.bits().iter().copied().zip(table.row(i).iter().copied()).collect();
            Ok(MckpClass::from_losses(name.clone(), params, &losses))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: u64 = classes.iter().map(|c| c.params).sum();
    let inst = MckpInstance::new(classes, capacity_bits(b_target, total))?;
    inst.check_feasible()?;
    Ok(inst)
}

/// Removes every item dominated by a lighter-or-equal, at-least-as-profitable
/// item of the same class. Survivors have strictly increasing weight and
/// strictly increasing profit.
pub fn dominance_filter(inst: &MckpInstance) -> MckpInstance {
    let classes = inst
        .classes
        .iter()
        .map(|c| {
            let mut kept: Vec<MckpItem> = Vec::with_capacity(c.items.len());
            for &item in &c.items {
                // weights increase along the list, so only a strictly better
                // profit than every lighter survivor escapes domination
                if kept.last().is_none_or(|k| item.profit > k.profit) {
                    kept.push(item);
                }
            }
            MckpClass {
                items: kept,
                ..c.clone()
            }
        })
        .collect();
    MckpInstance {
        classes,
        capacity: inst.capacity,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBits {
    pub name: String,
    pub bit: u32,
    pub params: u64,
    pub delta_loss: f64,
}

/// One chosen bit-width per layer plus size statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAssignment {
    pub layers: Vec<LayerBits>,
    pub capacity_bits: u64,
    pub used_bits: u64,
    /// Sum of chosen `dL` in layer order.
    pub total_delta_loss: f64,
    /// `used_bits / sum(params)`
    pub avg_bits: f64,
    /// `32 * sum(params) / used_bits`
    pub w_ratio: f64,
}

impl BitAssignment {
    /// `choice[i]` indexes into class `i`'s item list.
    pub fn from_choice(inst: &MckpInstance, choice: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(choice.len());
        let mut used = 0u64;
        let mut total = 0.0;
        for (c, &j) in inst.classes.iter().zip(choice) {
            let item = c.items[j];
            used += item.weight;
            total += -item.profit;
            layers.push(LayerBits {
                name: c.name.clone(),
                bit: item.bit,
                params: c.params,
                delta_loss: -item.profit,
            });
        }
        let params = inst.total_params() as f64;
        BitAssignment {
            layers,
            capacity_bits: inst.capacity,
            used_bits: used,
            total_delta_loss: total,
            avg_bits: used as f64 / params,
            w_ratio: 32.0 * params / used as f64,
        }
    }

    pub fn bit_of(&self, layer: &str) -> Option<u32> {
        self.layers.iter().find(|l| l.name == layer).map(|l| l.bit)
    }

    pub fn bits(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.bit).collect()
    }
}

/// Which layer the greedy loop promotes next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreedyCriterion {
    /// Largest loss reduction per added bit of storage.
    Original,
    /// Smallest loss reduction per added bit of storage.
    Reversed,
    /// Uniformly random among the promotions that fit.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Promotion {
    pub class: usize,
    pub from_bit: u32,
    pub to_bit: u32,
    /// `(dL_from - dL_to) / (weight_to - weight_from)`
    pub priority: f64,
    pub total_delta_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyRun {
    pub assignment: BitAssignment,
    pub promotions: Vec<Promotion>,
}

/// Greedy promotion loop over a dominance-filtered instance.
///
/// Every class starts at its lightest item. Each round computes, for every
/// class with a next item, the loss reduction per added storage bit of
/// moving to it; promotions that would overflow the capacity are skipped,
/// and the best remaining one (per `criterion`, ties to the lowest class
/// index) is applied. The loop ends when nothing fits.
pub fn greedy_run(inst: &MckpInstance, criterion: GreedyCriterion) -> Result<GreedyRun> {
    inst.check_feasible()?;
    let mut rng = match criterion {
        GreedyCriterion::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut choice = vec![0usize; inst.classes.len()];
    let mut used = inst.min_weight();
    let mut total: f64 = inst.classes.iter().map(|c| -c.items[0].profit).sum();
    let mut promotions = Vec::new();
    loop {
        let candidates: Vec<(usize, f64)> = inst
            .classes
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let cur = c.items[choice[i]];
                let next = c.items.get(choice[i] + 1)?;
                let extra = next.weight - cur.weight;
                (used + extra <= inst.capacity)
                    .then(|| (i, (next.profit - cur.profit) / extra as f64))
            })
            .collect();
        if candidates.is_empty() {
            break;
        }
        let (class, priority) = match criterion {
            GreedyCriterion::Original => candidates
                .iter()
                .copied()
                .reduce(|best, c| if c.1 > best.1 { c } else { best })
                .unwrap(),
            GreedyCriterion::Reversed => candidates
                .iter()
                .copied()
                .reduce(|best, c| if c.1 < best.1 { c } else { best })
                .unwrap(),
            GreedyCriterion::Random { .. } => {
                let rng = rng.as_mut().unwrap();
                candidates[rng.random_range(0..candidates.len())]
            }
        };
        let c = &inst.classes[class];
        let (from, to) = (c.items[choice[class]], c.items[choice[class] + 1]);
        used += to.weight - from.weight;
        total += from.profit - to.profit;
        choice[class] += 1;
        promotions.push(Promotion {
            class,
            from_bit: from.bit,
            to_bit: to.bit,
            priority,
            total_delta_loss: total,
        });
    }
    Ok(GreedyRun {
        assignment: BitAssignment::from_choice(inst, &choice),
        promotions,
    })
}

/// Greedy assignment with the loss-reduction-per-bit criterion.
pub fn greedy_assign(inst: &MckpInstance) -> Result<BitAssignment> {
    greedy_run(inst, GreedyCriterion::Original).map(|r| r.assignment)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Optimal assignment by dynamic programming over (class, residual capacity).
///
/// Weights and capacity are first divided by the gcd of all item weights,
/// which leaves the feasible set unchanged.
pub fn dp_exact(inst: &MckpInstance) -> Result<BitAssignment> {
    inst.check_feasible()?;
    let g = inst
        .classes
        .iter()
        .flat_map(|c| c.items.iter().map(|i| i.weight))
        .fold(0, gcd)
        .max(1);
    let cap = (inst.capacity / g) as usize;
    let cells = inst.classes.len() as u128 * (cap as u128 + 1);
    if cells > DP_CELL_BUDGET {
        return Err(Error::Budget {
            what: "dynamic programming table",
            required: cells,
            limit: DP_CELL_BUDGET,
            advice: "use the exhaustive solver for few classes or the greedy solver",
        });
    }

    // best[c]: max profit over the classes so far with total weight <= c
    let mut best = vec![0.0f64; cap + 1];
    let mut choices: Vec<Vec<u8>> = Vec::with_capacity(inst.classes.len());
    for class in &inst.classes {
        let mut next = vec![f64::NEG_INFINITY; cap + 1];
        let mut pick = vec![u8::MAX; cap + 1];
        for (j, item) in class.items.iter().enumerate() {
            let w = (item.weight / g) as usize;
            for c in w..=cap {
                let v = best[c - w] + item.profit;
                if v > next[c] {
                    next[c] = v;
                    pick[c] = j as u8;
                }
            }
        }
        best = next;
        choices.push(pick);
    }

    let mut choice = vec![0usize; inst.classes.len()];
    let mut c = cap;
    for (i, class) in inst.classes.iter().enumerate().rev() {
        let j = choices[i][c] as usize;
        choice[i] = j;
        c -= (class.items[j].weight / g) as usize;
    }
    Ok(BitAssignment::from_choice(inst, &choice))
}

/// Optimal assignment by enumerating every combination. Ties keep the
/// lexicographically first choice vector.
pub fn exhaustive(inst: &MckpInstance) -> Result<BitAssignment> {
    inst.check_feasible()?;
    let combos = inst
        .classes
        .iter()
        .try_fold(1u128, |acc, c| acc.checked_mul(c.items.len() as u128))
        .unwrap_or(u128::MAX);
    if combos > EXHAUSTIVE_BUDGET {
        return Err(Error::Budget {
            what: "exhaustive enumeration",
            required: combos,
            limit: EXHAUSTIVE_BUDGET,
            advice: "use the dynamic programming or greedy solver",
        });
    }
    let k = inst.classes.len();
    let mut odo = vec![0usize; k];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let mut weight = 0u64;
        let mut profit = 0.0;
        for (c, &j) in inst.classes.iter().zip(&odo) {
            weight += c.items[j].weight;
            profit += c.items[j].profit;
        }
        if weight <= inst.capacity && best.as_ref().is_none_or(|b| profit > b.0) {
            best = Some((profit, odo.clone()));
        }
        // last class varies fastest
        let mut i = k;
        loop {
            if i == 0 {
                let (_, choice) = best.expect("feasibility checked above");
                return Ok(BitAssignment::from_choice(inst, &choice));
            }
            i -= 1;
            odo[i] += 1;
            if odo[i] < inst.classes[i].items.len() {
                break;
            }
            odo[i] = 0;
        }
    }
}

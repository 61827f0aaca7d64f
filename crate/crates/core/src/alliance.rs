//! Working-alliance inventory and turn-level rating.
//!
//! Each turn is compared with every inventory item by cosine similarity of
//! their embeddings. A scale's score is the sign-weighted sum of its member
//! items' similarities.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Session, Turn};
use crate::embed::{cosine, Embedder};

#[derive(Debug, Error)]
pub enum AllianceError {
    #[error("item {item}: {detail}")]
    Item { item: String, detail: String },
    #[error("scale {0} has no items")]
    EmptyScale(Scale),
    #[error("inventory has no items")]
    Empty,
    #[error("inventory vectors have dimension {have}, embedder produces {want}")]
    Dimension { have: usize, want: usize },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Task,
    Bond,
    Goal,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Task, Scale::Bond, Scale::Goal];

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Task => "task",
            Scale::Bond => "bond",
            Scale::Goal => "goal",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "task" => Ok(Scale::Task),
            "bond" => Ok(Scale::Bond),
            "goal" => Ok(Scale::Goal),
            other => Err(format!("unknown scale {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InventoryItem {
    pub id: u32,
    pub text: String,
    pub scale: Scale,
    pub sign: i8,
}

/// A validated questionnaire. Items are kept in file order; ids are
/// unique and contiguous `1..=N` but may appear in any order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    name: String,
    items: Vec<InventoryItem>,
}

impl Inventory {
    pub fn new(name: impl Into<String>, items: Vec<InventoryItem>) -> Result<Self, AllianceError> {
        if items.is_empty() {
            return Err(AllianceError::Empty);
        }
        let mut seen = BTreeSet::new();
        for item in &items {
            let bad = |detail: &str| AllianceError::Item {
                item: item.id.to_string(),
                detail: detail.to_string(),
            };
            if !seen.insert(item.id) {
                return Err(bad("duplicate item id"));
            }
            if item.sign != 1 && item.sign != -1 {
                return Err(bad(&format!("sign must be +1 or -1, got {}", item.sign)));
            }
            if item.text.trim().is_empty() {
                return Err(bad("empty item text"));
            }
        }
        let n = items.len() as u32;
        if let Some(gap) = (1..=n).find(|id| !seen.contains(id)) {
            return Err(AllianceError::Item {
                item: gap.to_string(),
                detail: format!("item ids must be contiguous 1..={n}"),
            });
        }
        for scale in Scale::ALL {
            if !items.iter().any(|i| i.scale == scale) {
                return Err(AllianceError::EmptyScale(scale));
            }
        }
        Ok(Self {
            name: name.into(),
            items,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn items(&self) -> &[InventoryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn scale_len(&self, scale: Scale) -> usize {
        self.items.iter().filter(|i| i.scale == scale).count()
    }

    /// Embeds every item text, producing a scorer tied to `embedder`.
    pub fn bind<E: Embedder + ?Sized>(&self, embedder: &E) -> BoundInventory {
        BoundInventory {
            inventory: self.clone(),
            vectors: self.items.iter().map(|i| embedder.embed(&i.text).values).collect(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ItemRecord {
    id: u32,
    text: String,
    scale: String,
    sign: i64,
}

/// Reads a line-delimited JSON inventory: `{"id", "text", "scale", "sign"}` per line.
pub fn load_inventory(path: &Path) -> Result<Inventory, AllianceError> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("inventory")
        .to_string();
    parse_inventory(&name, &fs::read_to_string(path)?)
}

pub fn parse_inventory(name: &str, contents: &str) -> Result<Inventory, AllianceError> {
    let mut items = Vec::new();
    for (i, raw) in contents.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let record: ItemRecord = serde_json::from_str(raw).map_err(|e| AllianceError::Parse {
            line,
            detail: e.to_string(),
        })?;
        let scale = record.scale.parse().map_err(|detail| AllianceError::Item {
            item: record.id.to_string(),
            detail,
        })?;
        let sign = match record.sign {
            1 => 1,
            -1 => -1,
            other => {
                return Err(AllianceError::Item {
                    item: record.id.to_string(),
                    detail: format!("sign must be +1 or -1, got {other}"),
                })
            }
        };
        items.push(InventoryItem {
            id: record.id,
            text: record.text,
            scale,
            sign,
        });
    }
    Inventory::new(name, items)
}

pub fn write_inventory(inventory: &Inventory) -> String {
    let mut out = String::new();
    for item in inventory.items() {
        let line = serde_json::json!({
            "id": item.id,
            "text": item.text,
            "scale": item.scale,
            "sign": item.sign,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Turn rating: per-item cosines plus the three signed scale sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllianceScore {
    pub per_item: Vec<f64>,
    pub task: f64,
    pub bond: f64,
    pub goal: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl AllianceScore {
    pub fn scale(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Task => self.task,
            Scale::Bond => self.bond,
            Scale::Goal => self.goal,
        }
    }

    pub fn triple(&self) -> [f64; 3] {
        [self.task, self.bond, self.goal]
    }

    /// Scale value divided by its member count, for display.
    pub fn normalized(&self, inventory: &Inventory, scale: Scale) -> f64 {
        self.scale(scale) / inventory.scale_len(scale) as f64
    }
}

/// An inventory with item vectors computed under one embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundInventory {
    inventory: Inventory,
    vectors: Vec<Vec<f64>>,
}

impl BoundInventory {
    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn item_vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn score_text<E: Embedder + ?Sized>(&self, embedder: &E, text: &str) -> Result<AllianceScore, AllianceError> {
        let embedding = embedder.embed(text);
        self.score_vector(&embedding.values, embedding.degenerate)
    }

    pub fn score_vector(&self, vector: &[f64], degenerate: bool) -> Result<AllianceScore, AllianceError> {
        let want = self.vectors.first().map_or(0, Vec::len);
        if vector.len() != want {
            return Err(AllianceError::Dimension {
                have: vector.len(),
                want,
            });
        }
        let n = self.inventory.len();
        if degenerate {
            return Ok(AllianceScore {
                per_item: vec![0.0; n],
                task: 0.0,
                bond: 0.0,
                goal: 0.0,
                degenerate: true,
            });
        }
        let per_item: Vec<f64> = self
            .vectors
            .iter()
            .map(|item| cosine(vector, item).expect("item vectors share one dimension"))
            .collect();
        let mut sums = [0.0f64; 3];
        for (item, score) in self.inventory.items.iter().zip(&per_item) {
            sums[item.scale as usize] += f64::from(item.sign) * score;
        }
        Ok(AllianceScore {
            per_item,
            task: sums[Scale::Task as usize],
            bond: sums[Scale::Bond as usize],
            goal: sums[Scale::Goal as usize],
            degenerate: false,
        })
    }

    pub fn score_turn<E: Embedder + ?Sized>(&self, embedder: &E, turn: &Turn) -> Result<AllianceScore, AllianceError> {
        self.score_text(embedder, &turn.text)
    }

    pub fn score_session<E: Embedder + ?Sized>(
        &self,
        embedder: &E,
        session: &Session,
    ) -> Result<Vec<AllianceScore>, AllianceError> {
        session.turns.iter().map(|t| self.score_turn(embedder, t)).collect()
    }

    /// Fails unless the item vectors were computed with `embedder`'s width.
    pub fn check_embedder<E: Embedder + ?Sized>(&self, embedder: &E) -> Result<(), AllianceError> {
        let have = self.vectors.first().map_or(0, Vec::len);
        if have != embedder.dimension() {
            return Err(AllianceError::Dimension {
                have,
                want: embedder.dimension(),
            });
        }
        Ok(())
    }
}

pub const DEFAULT_INVENTORY_NAME: &str = "alliance-36";

/// Synthetic 36-item stand-in for a working-alliance questionnaire:
/// 12 items per scale, 8 positively and 4 negatively keyed.
pub fn default_inventory() -> Inventory {
    const ITEMS: [(Scale, i8, &str); 36] = [
        (
            Scale::Task,
            1,
            "We agree on the practical steps that will help me change",
        ),
        (Scale::Bond, 1, "I feel my therapist genuinely cares about me"),
        (Scale::Goal, 1, "We agree on the goals I want to reach"),
        (
            Scale::Task,
            1,
            "The exercises we practice in sessions feel useful and relevant",
        ),
        (Scale::Bond, -1, "I feel judged and criticized by my therapist"),
        (Scale::Goal, 1, "We share a clear vision of what recovery looks like"),
        (Scale::Task, -1, "The assignments seem pointless and confusing"),
        (Scale::Bond, 1, "I trust my therapist and feel safe sharing openly"),
        (Scale::Goal, -1, "We disagree about what I should be aiming for"),
        (
            Scale::Task,
            1,
            "I understand how our weekly tasks connect to my progress",
        ),
        (Scale::Bond, 1, "My therapist respects me and listens warmly"),
        (Scale::Goal, 1, "My therapist supports the changes I hope to make"),
        (Scale::Task, 1, "We plan concrete homework that I can actually complete"),
        (Scale::Bond, -1, "I feel distant and guarded around my therapist"),
        (Scale::Goal, 1, "We are working toward outcomes that matter to me"),
        (Scale::Task, -1, "We waste time on activities that lead nowhere"),
        (
            Scale::Bond,
            1,
            "I feel understood and appreciated during our conversations",
        ),
        (Scale::Goal, -1, "My therapist pushes goals that are not mine"),
        (Scale::Task, 1, "The activities we choose make sense for my situation"),
        (Scale::Bond, 1, "We have a warm and honest connection"),
        (Scale::Goal, 1, "We set meaningful targets for my future"),
        (Scale::Task, 1, "I know exactly what to practice between our meetings"),
        (Scale::Bond, -1, "My therapist seems cold and dismissive"),
        (Scale::Goal, 1, "I believe our direction will improve my life"),
        (Scale::Task, -1, "I am unsure why we keep doing these drills"),
        (Scale::Bond, 1, "I am comfortable being vulnerable with my therapist"),
        (Scale::Goal, -1, "I feel lost about where this therapy is heading"),
        (
            Scale::Task,
            1,
            "We work through each problem in a structured and clear way",
        ),
        (Scale::Bond, 1, "My therapist is supportive and kind toward me"),
        (Scale::Goal, 1, "We both understand what success means for me"),
        (Scale::Task, -1, "The work in sessions feels irrelevant and frustrating"),
        (Scale::Bond, -1, "I doubt my therapist likes or values me"),
        (Scale::Goal, 1, "Our aims for therapy are aligned and hopeful"),
        (Scale::Task, 1, "The methods we use here help me cope better"),
        (Scale::Bond, 1, "I feel accepted even when I struggle"),
        (Scale::Goal, -1, "Our priorities clash and leave me hopeless"),
    ];
    let items = ITEMS
        .iter()
        .enumerate()
        .map(|(i, &(scale, sign, text))| InventoryItem {
            id: i as u32 + 1,
            text: text.to_string(),
            scale,
            sign,
        })
        .collect();
    Inventory::new(DEFAULT_INVENTORY_NAME, items).expect("built-in inventory is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;
    use crate::embed::HashedTfIdf;

    fn embedder() -> HashedTfIdf {
        let inv = default_inventory();
        let texts: Vec<&str> = inv.items().iter().map(|i| i.text.as_str()).collect();
        HashedTfIdf::fit(&texts, 300, 42).unwrap()
    }

    #[test]
    fn default_inventory_has_twelve_per_scale() {
        let inv = default_inventory();
        assert_eq!(inv.len(), 36);
        for scale in Scale::ALL {
            assert_eq!(inv.scale_len(scale), 12);
            let negatives = inv.items().iter().filter(|i| i.scale == scale && i.sign < 0).count();
            assert_eq!(negatives, 4);
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut text = write_inventory(&default_inventory());
        text = text.replacen("\"id\":6,", "\"id\":5,", 1);
        match parse_inventory("dup", &text) {
            Err(AllianceError::Item { item, detail }) => {
                assert_eq!(item, "5");
                assert!(detail.contains("duplicate"));
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn bad_scale_and_sign_are_rejected() {
        let bad_scale = "{\"id\":1,\"text\":\"x\",\"scale\":\"trust\",\"sign\":1}\n";
        assert!(matches!(
            parse_inventory("x", bad_scale),
            Err(AllianceError::Item { .. })
        ));
        let bad_sign = "{\"id\":1,\"text\":\"x\",\"scale\":\"task\",\"sign\":0}\n";
        assert!(matches!(
            parse_inventory("x", bad_sign),
            Err(AllianceError::Item { .. })
        ));
        let one_scale = "{\"id\":1,\"text\":\"x\",\"scale\":\"task\",\"sign\":1}\n";
        assert!(matches!(
            parse_inventory("x", one_scale),
            Err(AllianceError::EmptyScale(Scale::Bond))
        ));
    }

    #[test]
    fn smaller_inventory_sets_score_width() {
        let items: Vec<InventoryItem> = (0..24)
            .map(|i| InventoryItem {
                id: i + 1,
                text: format!("statement number {i} about {}", Scale::ALL[(i % 3) as usize]),
                scale: Scale::ALL[(i % 3) as usize],
                sign: if i % 4 == 0 { -1 } else { 1 },
            })
            .collect();
        let inv = Inventory::new("small", items).unwrap();
        let e = embedder();
        let score = inv.bind(&e).score_text(&e, "statement about goals").unwrap();
        assert_eq!(score.per_item.len(), 24);
        assert_eq!(inv.scale_len(Scale::Task), 8);
    }

    #[test]
    fn identical_text_scores_one() {
        let inv = default_inventory();
        let e = embedder();
        let bound = inv.bind(&e);
        let turn = Turn::new("s", 0, Speaker::Patient, inv.items()[2].text.clone());
        let score = bound.score_turn(&e, &turn).unwrap();
        assert!((score.per_item[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_ones_give_signed_count() {
        let inv = default_inventory();
        // every item vector equal to the query: all cosines are exactly 1
        let v = vec![1.0, 0.0, 0.0];
        let bound = BoundInventory {
            inventory: inv,
            vectors: vec![v.clone(); 36],
        };
        let score = bound.score_vector(&v, false).unwrap();
        assert_eq!(score.task, 4.0);
        assert_eq!(score.bond, 4.0);
        assert_eq!(score.goal, 4.0);
    }

    #[test]
    fn degenerate_turn_scores_zero() {
        let e = embedder();
        let bound = default_inventory().bind(&e);
        let score = bound.score_text(&e, "?!").unwrap();
        assert!(score.degenerate);
        assert!(score.per_item.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn session_scores_follow_turn_order() {
        let e = embedder();
        let bound = default_inventory().bind(&e);
        let session = Session::from_script(
            "s",
            crate::corpus::Condition::Unlabeled,
            &[
                (Speaker::Patient, "I trust you"),
                (Speaker::Therapist, "what goals matter"),
                (Speaker::Patient, "I trust you"),
                (Speaker::Therapist, "homework steps"),
            ],
        );
        let scores = bound.score_session(&e, &session).unwrap();
        assert_eq!(scores.len(), 4);
        assert_eq!(scores[0], scores[2]);
        assert_eq!(scores[1], bound.score_turn(&e, &session.turns[1]).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sign_flip_changes_only_owning_scale(item in 0usize..36, words in prop::collection::vec("[a-z]{3,7}", 1..10)) {
                let e = embedder();
                let inv = default_inventory();
                let text = words.join(" ") + " therapist goals";
                let base = inv.bind(&e).score_text(&e, &text).unwrap();
                let mut items = inv.items().to_vec();
                items[item].sign = -items[item].sign;
                let flipped_inv = Inventory::new("flipped", items.clone()).unwrap();
                let flipped = flipped_inv.bind(&e).score_text(&e, &text).unwrap();
                let owner = items[item].scale;
                let original_sign = f64::from(-items[item].sign);
                for scale in Scale::ALL {
                    let delta = flipped.scale(scale) - base.scale(scale);
                    let expected = if scale == owner { -2.0 * original_sign * base.per_item[item] } else { 0.0 };
                    prop_assert!((delta - expected).abs() < 1e-12);
                }
            }

            #[test]
            fn item_order_does_not_change_scales(seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let e = embedder();
                let inv = default_inventory();
                let mut items = inv.items().to_vec();
                items.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let shuffled = Inventory::new("shuffled", items).unwrap();
                let text = "we agree on goals and I feel safe";
                let a = inv.bind(&e).score_text(&e, text).unwrap();
                let b = shuffled.bind(&e).score_text(&e, text).unwrap();
                for scale in Scale::ALL {
                    prop_assert!((a.scale(scale) - b.scale(scale)).abs() < 1e-12);
                    prop_assert!(a.scale(scale).abs() <= 12.0);
                }
                prop_assert!(a.per_item.iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
    }
}

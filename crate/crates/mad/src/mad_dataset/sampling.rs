//! Episode and evaluation-task sampling.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{MadDataset, Role, Split};
use crate::data::LabeledImages;
use crate::error::{MadError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Attack(u32),
    Clean,
}

/// One mini adversarial-training task: support set S and query set Q.
/// Origins carry the source index so S ∩ Q disjointness is checkable.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: LabeledImages,
    pub support_origin: Vec<(Origin, u32)>,
    pub query: LabeledImages,
    pub query_origin: Vec<(Origin, u32)>,
    pub attacks_s: Vec<u32>,
    pub attacks_q: Vec<u32>,
}

/// Accumulates drawn examples into a labeled set.
struct SetBuilder {
    shape: (usize, usize, usize),
    pixels: Vec<f32>,
    labels: Vec<usize>,
    origin: Vec<(Origin, u32)>,
}

impl SetBuilder {
    fn new(shape: (usize, usize, usize)) -> Self {
        Self { shape, pixels: Vec::new(), labels: Vec::new(), origin: Vec::new() }
    }

    fn push(&mut self, store: &super::ClassStore, index: usize, label: usize, origin: Origin) {
        self.pixels
            .extend(store.images.slice(ndarray::s![index, .., .., ..]).iter().cloned());
        self.labels.push(label);
        self.origin.push((origin, store.source_indices[index]));
    }

    fn finish(self) -> Result<(LabeledImages, Vec<(Origin, u32)>)> {
        let n = self.labels.len();
        let (c, h, w) = self.shape;
        let images = Array4::from_shape_vec((n, c, h, w), self.pixels)
            .map_err(|e| MadError::Data(format!("episode assembly: {e}")))?;
        Ok((LabeledImages::new(images, self.labels)?, self.origin))
    }
}

/// Shuffle-and-take draw of `need` distinct positions from `pool`.
fn draw(pool: &[usize], need: usize, what: &str, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if pool.len() < need {
        return Err(MadError::Sampling(format!(
            "{what}: need {need} examples but the split holds {}",
            pool.len()
        )));
    }
    let mut order = pool.to_vec();
    order.shuffle(rng);
    order.truncate(need);
    Ok(order)
}

/// Draw one Meta-AT training episode: A attacks uniformly from the
/// meta-train role; S gets k examples per class per attack plus k clean per
/// class, Q covers A_Q of those attacks with m per class plus m clean.
pub fn sample_train_episode(
    dataset: &MadDataset,
    a_ways: usize,
    a_query: usize,
    k: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if a_ways == 0 || k == 0 || m == 0 {
        return Err(MadError::Config("episode parameters A, k, m must all be >= 1".into()));
    }
    if a_query == 0 || a_query > a_ways {
        return Err(MadError::Config(format!("A_Q must be in 1..=A, got {a_query} with A={a_ways}")));
    }
    if !dataset.has_splits() {
        return Err(MadError::Config("dataset has no split assignment; run split_3_1_1 first".into()));
    }
    let pool = dataset.attacks_in_role(Role::MetaTrain);
    if pool.len() < a_ways {
        return Err(MadError::Sampling(format!(
            "meta_train role holds {} attacks but the episode needs A={a_ways}",
            pool.len()
        )));
    }
    // Uniform A-subset, then a uniform A_Q-subset of it.
    let mut shuffled = pool.clone();
    shuffled.shuffle(rng);
    let mut attacks_s: Vec<u32> = shuffled[..a_ways].to_vec();
    let mut chosen = attacks_s.clone();
    chosen.shuffle(rng);
    let mut attacks_q: Vec<u32> = chosen[..a_query].to_vec();
    attacks_s.sort_unstable();
    attacks_q.sort_unstable();

    let mut support = SetBuilder::new(dataset.image_shape);
    let mut query = SetBuilder::new(dataset.image_shape);
    for &id in &attacks_s {
        let store = dataset.attacks.get(&id).expect("role attacks exist");
        let in_query = attacks_q.contains(&id);
        for cls in 0..dataset.num_classes {
            let train = &store.splits[cls].train;
            let need = if in_query { k + m } else { k };
            let picked = draw(train, need, &format!("attack {id} class {cls} (train split)"), rng)?;
            for &i in &picked[..k] {
                support.push(&store.classes[cls], i, cls, Origin::Attack(id));
            }
            if in_query {
                for &i in &picked[k..] {
                    query.push(&store.classes[cls], i, cls, Origin::Attack(id));
                }
            }
        }
    }
    for cls in 0..dataset.num_classes {
        let train = &dataset.clean_splits[cls].train;
        let picked = draw(train, k + m, &format!("clean class {cls} (train split)"), rng)?;
        for &i in &picked[..k] {
            support.push(&dataset.clean_pool[cls], i, cls, Origin::Clean);
        }
        for &i in &picked[k..] {
            query.push(&dataset.clean_pool[cls], i, cls, Origin::Clean);
        }
    }

    let (support, support_origin) = support.finish()?;
    let (query, query_origin) = query.finish()?;
    Ok(Episode { support, support_origin, query, query_origin, attacks_s, attacks_q })
}

/// Draw one K-shot evaluation task for a single attack: S′ holds K examples
/// per class (train split) plus K clean, Q′ holds M per class plus M clean
/// from the val split (meta_val role) or test split (test roles).
pub fn sample_eval_task(
    dataset: &MadDataset,
    attack_id: u32,
    k_shot: usize,
    m_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if k_shot == 0 {
        return Err(MadError::Config("evaluation shot K must be >= 1".into()));
    }
    if m_query == 0 {
        return Err(MadError::Config("evaluation query count M must be >= 1".into()));
    }
    if !dataset.has_splits() {
        return Err(MadError::Config("dataset has no split assignment; run split_3_1_1 first".into()));
    }
    let store = dataset
        .attacks
        .get(&attack_id)
        .ok_or_else(|| MadError::Config(format!("attack {attack_id} not in dataset")))?;
    let role = dataset
        .role_of_attack(attack_id)
        .ok_or_else(|| MadError::Config(format!("attack {attack_id} has no role assignment")))?;
    if role == Role::MetaTrain {
        return Err(MadError::Config(format!(
            "attack {attack_id} serves the meta_train role and cannot be used as an evaluation task"
        )));
    }
    let q_split = if role == Role::MetaVal { Split::Val } else { Split::Test };

    let mut support = SetBuilder::new(dataset.image_shape);
    let mut query = SetBuilder::new(dataset.image_shape);
    for cls in 0..dataset.num_classes {
        let picked = draw(
            &store.splits[cls].train,
            k_shot,
            &format!("attack {attack_id} class {cls} (train split)"),
            rng,
        )?;
        for &i in &picked {
            support.push(&store.classes[cls], i, cls, Origin::Attack(attack_id));
        }
        let picked = draw(
            store.splits[cls].of(q_split),
            m_query,
            &format!("attack {attack_id} class {cls} ({q_split:?} split)"),
            rng,
        )?;
        for &i in &picked {
            query.push(&store.classes[cls], i, cls, Origin::Attack(attack_id));
        }
        let picked = draw(&dataset.clean_splits[cls].train, k_shot, &format!("clean class {cls} (train split)"), rng)?;
        for &i in &picked {
            support.push(&dataset.clean_pool[cls], i, cls, Origin::Clean);
        }
        let picked = draw(
            dataset.clean_splits[cls].of(q_split),
            m_query,
            &format!("clean class {cls} ({q_split:?} split)"),
            rng,
        )?;
        for &i in &picked {
            query.push(&dataset.clean_pool[cls], i, cls, Origin::Clean);
        }
    }

    let (support, support_origin) = support.finish()?;
    let (query, query_origin) = query.finish()?;
    Ok(Episode {
        support,
        support_origin,
        query,
        query_origin,
        attacks_s: vec![attack_id],
        attacks_q: vec![attack_id],
    })
}

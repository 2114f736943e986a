use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PartialLabelMatrix, TextRecord};
use crate::error::{Error, Result};

/// Text ids of the train/validation/test partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Largest-remainder apportionment of `n` items by `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let left = n - sizes.iter().sum::<usize>();
    for &k in order.iter().take(left) {
        sizes[k] += 1;
    }
    sizes
}

/// Partitions texts into train/val/test. Each text is keyed by its rarest
/// positive topic and every key is spread across splits in proportion, so
/// per-topic positive counts for the key topic land within one of the exact
/// ratio; overall split sizes follow the largest-remainder rule.
pub fn stratified_split(
    texts: &[TextRecord],
    labels: &PartialLabelMatrix,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Split> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = texts.len();
    let targets = apportion(n, &ratios);
    let freq = labels.positives_per_topic();
    let mut positives: HashMap<&str, Vec<&str>> = HashMap::new();
    for (x, t, l) in labels.iter() {
        if l {
            positives.entry(x).or_default().push(t);
        }
    }
    let mut strata: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    for (i, t) in texts.iter().enumerate() {
        let key = positives
            .get(t.text_id.as_str())
            .and_then(|ts| ts.iter().map(|&topic| (freq[topic], topic.to_string())).min())
            .unwrap_or((usize::MAX, String::new()));
        strata.entry(key).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = [0usize; 3];
    let mut which = vec![usize::MAX; n];
    let mut leftovers: Vec<(Vec<usize>, [f64; 3])> = Vec::new();
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let m = members.len();
        let exact: Vec<f64> = ratios.iter().map(|r| r * m as f64).collect();
        let mut pos = 0;
        for k in 0..3 {
            let take = exact[k].floor() as usize;
            for &i in &members[pos..pos + take] {
                which[i] = k;
            }
            assigned[k] += take;
            pos += take;
        }
        let frac = [
            exact[0] - exact[0].floor(),
            exact[1] - exact[1].floor(),
            exact[2] - exact[2].floor(),
        ];
        leftovers.push((members[pos..].to_vec(), frac));
    }
    // Remaining items go, stratum by stratum, to the splits with the largest
    // fractional share that still have room, at most one per split per
    // stratum while that is possible.
    for (items, frac) in leftovers {
        let mut used = [false; 3];
        for i in items {
            let room = |k: usize| assigned[k] < targets[k];
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
            let k = order
                .iter()
                .copied()
                .find(|&k| room(k) && !used[k])
                .or_else(|| order.iter().copied().find(|&k| room(k)))
                .expect("leftover count equals remaining capacity");
            used[k] = true;
            which[i] = k;
            assigned[k] += 1;
        }
    }

    let mut split = Split::default();
    for (i, t) in texts.iter().enumerate() {
        let bucket = match which[i] {
            0 => &mut split.train,
            1 => &mut split.val,
            _ => &mut split.test,
        };
        bucket.push(t.text_id.clone());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> Vec<TextRecord> {
        (0..n)
            .map(|i| TextRecord {
                text_id: format!("x{i}"),
                text: String::new(),
                source: String::new(),
            })
            .collect()
    }

    #[test]
    fn apportion_uses_largest_remainders() {
        assert_eq!(apportion(100, &[0.7, 0.15, 0.15]), [70, 15, 15]);
        assert_eq!(apportion(10, &[0.7, 0.15, 0.15]), [7, 2, 1]);
        assert_eq!(apportion(0, &[0.7, 0.15, 0.15]), [0, 0, 0]);
    }

    #[test]
    fn sizes_and_rare_topic_spread() {
        let texts = corpus(100);
        let mut labels = PartialLabelMatrix::new();
        for i in 0..10 {
            labels.insert(format!("x{i}"), "rare", true);
        }
        for i in 10..60 {
            labels.insert(format!("x{i}"), "common", true);
        }
        let s = stratified_split(&texts, &labels, [0.7, 0.15, 0.15], 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let count = |ids: &[String]| ids.iter().filter(|x| labels.get(x, "rare") == Some(true)).count();
        assert_eq!(count(&s.train), 7);
        assert!((1..=2).contains(&count(&s.val)));
        assert!((1..=2).contains(&count(&s.test)));
        assert_eq!(s, stratified_split(&texts, &labels, [0.7, 0.15, 0.15], 4).unwrap());
    }

    #[test]
    fn rejects_bad_ratios() {
        let texts = corpus(3);
        let labels = PartialLabelMatrix::new();
        assert!(matches!(
            stratified_split(&texts, &labels, [0.7, 0.2, 0.2], 0),
            Err(Error::Config(_))
        ));
    }
}

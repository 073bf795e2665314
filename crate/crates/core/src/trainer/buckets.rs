use rand::seq::SliceRandom;
use rand::Rng;

/// Groups sentence ids into batches of similar oracle-action length.
///
/// Ids are sorted by length (ties by id), cut into consecutive groups of
/// `bucket` sentences, and each group is shuffled and filled greedily: a
/// batch closes when one more sentence would exceed `batch_size`
/// sentences or `max_actions` total actions. A sentence longer than the
/// cap gets a batch of its own. The batch order is shuffled at the end.
pub fn make_buckets<R: Rng + ?Sized>(
    lengths: &[usize],
    batch_size: usize,
    max_actions: usize,
    bucket: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    for group in order.chunks(bucket.max(1)) {
        let mut group = group.to_vec();
        group.shuffle(rng);
        let mut current: Vec<usize> = Vec::new();
        let mut actions = 0;
        for id in group {
            let len = lengths[id];
            if len > max_actions {
                log::warn!("sentence {id} has {len} actions, above the cap of {max_actions}; batching it alone");
                batches.push(vec![id]);
                continue;
            }
            if !current.is_empty() && (current.len() + 1 > batch_size || actions + len > max_actions) {
                batches.push(std::mem::take(&mut current));
                actions = 0;
            }
            current.push(id);
            actions += len;
        }
        if !current.is_empty() {
            batches.push(current);
        }
    }
    batches.shuffle(rng);
    batches
}

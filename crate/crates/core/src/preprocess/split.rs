use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Participant counts per split by the largest-remainder rule, with every
/// split receiving at least one participant.
pub fn split_counts(participants: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    if participants < 3 {
        return Err(Error::InvalidArgument(format!(
            "participant-disjoint split needs at least 3 participants, got {participants}"
        )));
    }
    let exact = fractions.map(|f| f * participants as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = participants - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    // Borrow from the largest split for any that ended up empty.
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    Ok(counts)
}

/// Splits into (train, validation, test) so that no participant appears in
/// more than one part. Sample order inside each part follows the input.
pub fn split_dataset(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    let mut people: Vec<u32> = dataset.participants().into_iter().collect();
    let counts = split_counts(people.len(), fractions)?;
    people.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part_of = std::collections::HashMap::new();
    let mut cursor = 0;
    for (part, &count) in counts.iter().enumerate() {
        for &p in &people[cursor..cursor + count] {
            part_of.insert(p, part);
        }
        cursor += count;
    }
    let mut indices: [Vec<usize>; 3] = Default::default();
    for (i, l) in dataset.labels().iter().enumerate() {
        indices[part_of[&l.participant_id]].push(i);
    }
    Ok(indices.map(|idx| dataset.subset(&idx)))
}

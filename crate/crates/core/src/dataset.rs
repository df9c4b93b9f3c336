//! Builders that turn coded sequences into training data: ranking groups for
//! the reference selector and co-located patch stacks for the filtering
//! networks.
//!
//! At dataset-construction time the candidate pool holds unfiltered
//! reconstructions (the filters being trained do not exist yet); at inference
//! the pool holds the filtered output of earlier frames.

use crate::error::Result;
use crate::frame::Frame;
use crate::partition::PartitionMaps;
use crate::patch::{extract_patches, PatchSample};
use crate::rfs::{compute_metrics, ground_truth_potential, select_references, RfsConfig, RfsNet, Selection};
use crate::training::RankingGroup;
use crate::validation;

fn pool_range(n: usize, pool_size: usize) -> std::ops::Range<usize> {
    n.saturating_sub(pool_size)..n
}

/// Per-frame ranking batches with ground-truth potentials from the
/// block-matching compensation oracle. Frames with fewer than two valid
/// candidates are skipped (a single-element batch normalizes to zero and
/// carries no ranking signal).
pub fn build_ranking_groups(
    urfs: &[Frame],
    raws: &[Frame],
    config: &RfsConfig,
) -> Result<Vec<RankingGroup>> {
    let mut groups = Vec::new();
    for n in 0..urfs.len() {
        let pool: Vec<&Frame> = urfs[pool_range(n, config.pool_size)].iter().collect();
        if pool.is_empty() {
            continue;
        }
        let records = compute_metrics(&urfs[n], &pool, raws, config)?;
        let raw_n = raws
            .iter()
            .find(|f| f.index() == urfs[n].index())
            .ok_or_else(|| validation!("missing raw frame {}", urfs[n].index()))?;
        let mut features = Vec::new();
        let mut potentials = Vec::new();
        for record in records.iter().filter(|r| r.valid) {
            let pool_frame = pool
                .iter()
                .find(|f| f.index() == record.pool_index)
                .expect("record comes from the pool");
            features.push(record.features());
            potentials.push(ground_truth_potential(pool_frame, &urfs[n], raw_n)?);
        }
        if features.len() >= 2 {
            groups.push(RankingGroup { features, potentials });
        }
    }
    Ok(groups)
}

/// Patch dataset for the filtering networks.
///
/// With `m == 0` every frame contributes reference-free samples. With
/// `m > 0`, references are chosen per frame by the given selector over the
/// preceding reconstructions; frames without enough valid references are
/// skipped.
pub fn build_patch_dataset(
    urfs: &[Frame],
    maps: &[PartitionMaps],
    raws: &[Frame],
    selector: Option<(&RfsNet, &RfsConfig)>,
    m: usize,
    stride: usize,
) -> Result<Vec<PatchSample>> {
    if urfs.len() != maps.len() {
        return Err(validation!("{} frames but {} partition maps", urfs.len(), maps.len()));
    }
    if m > 0 && selector.is_none() {
        return Err(validation!("multi-frame samples need a reference selector"));
    }
    let mut out = Vec::new();
    for n in 0..urfs.len() {
        let raw = raws
            .iter()
            .find(|f| f.index() == urfs[n].index())
            .ok_or_else(|| validation!("missing raw frame {}", urfs[n].index()))?;
        if m == 0 {
            out.extend(extract_patches(raw, &urfs[n], &maps[n], &[], stride)?);
            continue;
        }
        let (net, config) = selector.unwrap();
        let pool: Vec<&Frame> = urfs[pool_range(n, config.pool_size)].iter().collect();
        if pool.is_empty() {
            continue;
        }
        let records = compute_metrics(&urfs[n], &pool, raws, config)?;
        let cfg = RfsConfig { num_selected: m, ..*config };
        match select_references(&records, net, &cfg)? {
            Selection::Selected(indices) => {
                let refs: Vec<&Frame> = indices
                    .iter()
                    .map(|&i| {
                        pool.iter()
                            .find(|f| f.index() == i)
                            .copied()
                            .ok_or_else(|| validation!("selected frame {i} missing from pool"))
                    })
                    .collect::<Result<_>>()?;
                out.extend(extract_patches(raw, &urfs[n], &maps[n], &refs, stride)?);
            }
            Selection::NotEnough { .. } => continue,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{proxy_encode, ProxyCodecConfig};
    use crate::partition::rasterize_partition;
    use crate::synth::moving_clip;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coded_clip() -> (Vec<Frame>, Vec<PartitionMaps>, Vec<Frame>) {
        let raws = moving_clip(64, 64, 10, 31).unwrap();
        let config = ProxyCodecConfig { qp_base: 33, ..Default::default() };
        let coded = proxy_encode(&raws, &config).unwrap();
        let maps = coded
            .layouts
            .iter()
            .map(|l| rasterize_partition(l, 64, 64).unwrap())
            .collect();
        (coded.urfs, maps, raws)
    }

    #[test]
    fn ranking_groups_have_aligned_members() {
        let (urfs, _, raws) = coded_clip();
        let config = RfsConfig::default();
        let groups = build_ranking_groups(&urfs, &raws, &config).unwrap();
        assert!(!groups.is_empty(), "fluctuating clip should yield valid references");
        for g in &groups {
            assert_eq!(g.features.len(), g.potentials.len());
            assert!(g.features.len() >= 2);
            for p in &g.potentials {
                assert!(p.is_finite() && *p > 0.0);
            }
        }
    }

    #[test]
    fn patch_datasets_carry_the_requested_references() {
        let (urfs, maps, raws) = coded_clip();
        let single = build_patch_dataset(&urfs, &maps, &raws, None, 0, 64).unwrap();
        assert_eq!(single.len(), 10);
        assert!(single.iter().all(|s| s.refs.is_empty()));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = RfsNet::new(&mut rng);
        let config = RfsConfig::default();
        let multi = build_patch_dataset(&urfs, &maps, &raws, Some((&net, &config)), 2, 64).unwrap();
        assert!(!multi.is_empty());
        assert!(multi.iter().all(|s| s.refs.len() == 2));
    }
}

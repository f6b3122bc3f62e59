//! Synthetic dataset generation, IID and shard-based non-IID client
//! partitioning, and IDX binary file ingestion.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{FedError, Result};

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: BTreeMap<usize, Vec<usize>>,
    /// Samples dropped because the dataset size was not a multiple of the
    /// shard size.
    pub dropped: usize,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for (client, indices) in &self.assignment {
            if indices.is_empty() {
                return Err(FedError::Partition(format!("client {client} is empty")));
            }
            for &i in indices {
                if i >= dataset_len {
                    return Err(FedError::Partition(format!("index {i} out of range")));
                }
                if seen[i] {
                    return Err(FedError::Partition(format!("index {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha12Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&salt.to_le_bytes());
    bytes[16..24].copy_from_slice(&0x6665647369_u64.to_le_bytes());
    ChaCha12Rng::from_seed(bytes)
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian blobs, one center per class, deterministic under `seed`.
///
/// Centers are drawn from N(0, spread² I) with spread 5 and samples from
/// N(center, I), which makes the classes well separated for a linear
/// classifier at small dimension.
pub fn synth_blobs(class_count: usize, per_class: usize, dim: usize, seed: u64) -> LabeledDataset {
    assert!(class_count > 0 && per_class > 0 && dim > 0);
    let mut rng = rng_for(seed, 0xb10b);
    let spread = 5.0;
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| spread * standard_normal(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(class_count * per_class);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            features.push(center.iter().map(|c| c + standard_normal(&mut rng)).collect());
            labels.push(k);
        }
    }
    // interleave classes so index order carries no label structure
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    LabeledDataset {
        features: order.iter().map(|&i| std::mem::take(&mut features[i])).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
        class_count,
    }
}

/// IID split: every client's label histogram matches the global one within
/// ±1 sample per class, via largest-remainder rounding of per-class quotas.
pub fn partition_iid(
    ds: &LabeledDataset,
    client_sizes: &[usize],
    seed: u64,
) -> Result<Partition> {
    let total: usize = client_sizes.iter().sum();
    if total > ds.len() {
        return Err(FedError::Partition(format!(
            "requested {total} samples from a dataset of {}",
            ds.len()
        )));
    }
    if client_sizes.iter().any(|&s| s == 0) {
        return Err(FedError::Partition("every client must be nonempty".into()));
    }
    let mut rng = rng_for(seed, 0x11d);
    // shuffled per-class pools
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let class_fractions: Vec<f64> = pools
        .iter()
        .map(|p| p.len() as f64 / ds.len() as f64)
        .collect();
    let mut cursors = vec![0usize; ds.class_count];
    let mut assignment = BTreeMap::new();
    for (client, &size) in client_sizes.iter().enumerate() {
        let mut quotas = largest_remainder(&class_fractions, size, client);
        // repair against pool availability: shift any excess demand to
        // classes that still have samples left
        let mut deficit = 0usize;
        for (k, q) in quotas.iter_mut().enumerate() {
            let avail = pools[k].len() - cursors[k];
            if *q > avail {
                deficit += *q - avail;
                *q = avail;
            }
        }
        while deficit > 0 {
            let spare = (0..ds.class_count)
                .filter(|&k| pools[k].len() - cursors[k] > quotas[k])
                .max_by_key(|&k| pools[k].len() - cursors[k] - quotas[k]);
            match spare {
                Some(k) => {
                    quotas[k] += 1;
                    deficit -= 1;
                }
                None => {
                    return Err(FedError::Partition(format!(
                        "dataset exhausted while building client {client}"
                    )))
                }
            }
        }
        let mut indices = Vec::with_capacity(size);
        for (k, &q) in quotas.iter().enumerate() {
            if cursors[k] + q > pools[k].len() {
                return Err(FedError::Partition(format!(
                    "class {k} exhausted while building client {client}"
                )));
            }
            indices.extend_from_slice(&pools[k][cursors[k]..cursors[k] + q]);
            cursors[k] += q;
        }
        indices.sort_unstable();
        assignment.insert(client, indices);
    }
    let p = Partition { assignment, dropped: 0 };
    p.validate(ds.len())?;
    Ok(p)
}

/// Integer quotas summing to `total`, proportional to `fractions`, by
/// largest-remainder rounding. Remainder ties rotate with `rotation` so
/// that successive clients do not all draw their extra sample from the
/// same class.
fn largest_remainder(fractions: &[f64], total: usize, rotation: usize) -> Vec<usize> {
    let k = fractions.len();
    let ideal: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut quotas: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut remainders: Vec<(usize, f64)> = ideal
        .iter()
        .enumerate()
        .map(|(i, x)| (i, x - x.floor()))
        .collect();
    remainders.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(((a.0 + k - rotation % k) % k).cmp(&((b.0 + k - rotation % k) % k)))
    });
    for (i, _) in remainders.iter().take(total - assigned) {
        quotas[*i] += 1;
    }
    quotas
}

/// Label-sorted contiguous shards dealt randomly to clients; every client
/// gets at least one shard and sizes are not forced equal. Remainder
/// samples beyond a whole number of shards are dropped and counted.
///
/// `client_dataset_size` caps the total number of shards in play at
/// roughly `n_clients · client_dataset_size / shard_size`.
pub fn partition_shards(
    ds: &LabeledDataset,
    n_clients: usize,
    shard_size: usize,
    client_dataset_size: usize,
    seed: u64,
) -> Result<Partition> {
    if shard_size == 0 || n_clients == 0 {
        return Err(FedError::Partition("shard_size and n_clients must be positive".into()));
    }
    let n_shards = ds.len() / shard_size;
    if n_shards < n_clients {
        return Err(FedError::Partition(format!(
            "{n_shards} shards of size {shard_size} cannot cover {n_clients} clients"
        )));
    }
    let target_shards = ((n_clients * client_dataset_size) as f64 / shard_size as f64).round() as usize;
    let use_shards = n_shards.min(target_shards.max(n_clients));

    let sorted = label_sorted_indices(ds);
    let dropped = ds.len() - n_shards * shard_size + (n_shards - use_shards) * shard_size;

    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    let mut rng = rng_for(seed, 0x5a4d);
    shard_ids.shuffle(&mut rng);
    shard_ids.truncate(use_shards);

    let mut assignment: BTreeMap<usize, Vec<usize>> =
        (0..n_clients).map(|c| (c, Vec::new())).collect();
    for (j, &shard) in shard_ids.iter().enumerate() {
        // first pass guarantees one shard each; the rest land uniformly
        let client = if j < n_clients {
            j
        } else {
            rng.gen_range(0..n_clients)
        };
        let start = shard * shard_size;
        assignment
            .get_mut(&client)
            .unwrap()
            .extend_from_slice(&sorted[start..start + shard_size]);
    }
    for indices in assignment.values_mut() {
        indices.sort_unstable();
    }
    let p = Partition { assignment, dropped };
    p.validate(ds.len())?;
    Ok(p)
}

/// Hand-picked shard placement: `shard_map[c]` lists the shard ids owned by
/// client `c` over the label-sorted dataset.
pub fn partition_handpick(
    ds: &LabeledDataset,
    shard_size: usize,
    shard_map: &[Vec<usize>],
) -> Result<Partition> {
    let n_shards = ds.len() / shard_size;
    let sorted = label_sorted_indices(ds);
    let mut assignment = BTreeMap::new();
    let mut used = vec![false; n_shards];
    for (client, shards) in shard_map.iter().enumerate() {
        if shards.is_empty() {
            return Err(FedError::Partition(format!("client {client} has no shard")));
        }
        let mut indices = Vec::new();
        for &s in shards {
            if s >= n_shards {
                return Err(FedError::Partition(format!("shard {s} out of range")));
            }
            if used[s] {
                return Err(FedError::Partition(format!("shard {s} assigned twice")));
            }
            used[s] = true;
            indices.extend_from_slice(&sorted[s * shard_size..(s + 1) * shard_size]);
        }
        indices.sort_unstable();
        assignment.insert(client, indices);
    }
    let dropped = ds.len() - used.iter().filter(|u| **u).count() * shard_size;
    let p = Partition { assignment, dropped };
    p.validate(ds.len())?;
    Ok(p)
}

/// Stable label sort, so ties keep dataset order.
fn label_sorted_indices(ds: &LabeledDataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.sort_by_key(|&i| ds.labels[i]);
    idx
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Big-endian IDX ingestion: pixels scaled to [0, 1], image and label
/// counts must agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let img_magic = read_u32_be(&images, 0)?;
    if img_magic != IDX_IMAGE_MAGIC {
        return Err(FedError::Ingestion {
            offset: 0,
            message: format!("bad image magic {img_magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        });
    }
    let n_images = read_u32_be(&images, 4)? as usize;
    let rows = read_u32_be(&images, 8)? as usize;
    let cols = read_u32_be(&images, 12)? as usize;
    let pixels = rows * cols;
    let expected = 16 + n_images * pixels;
    if images.len() < expected {
        return Err(FedError::Ingestion {
            offset: images.len() as u64,
            message: format!("image file truncated: {} bytes, expected {expected}", images.len()),
        });
    }

    let lbl_magic = read_u32_be(&labels, 0)?;
    if lbl_magic != IDX_LABEL_MAGIC {
        return Err(FedError::Ingestion {
            offset: 0,
            message: format!("bad label magic {lbl_magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"),
        });
    }
    let n_labels = read_u32_be(&labels, 4)? as usize;
    if labels.len() < 8 + n_labels {
        return Err(FedError::Ingestion {
            offset: labels.len() as u64,
            message: format!("label file truncated: {} bytes, expected {}", labels.len(), 8 + n_labels),
        });
    }
    if n_images != n_labels {
        return Err(FedError::Ingestion {
            offset: 4,
            message: format!("{n_images} images but {n_labels} labels"),
        });
    }

    let mut features = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let start = 16 + i * pixels;
        features.push(
            images[start..start + pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
        );
    }
    let label_values: Vec<usize> = labels[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let class_count = label_values.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(LabeledDataset {
        features,
        labels: label_values,
        class_count,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| FedError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(FedError::Ingestion {
            offset: offset as u64,
            message: "file too short".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_counts_and_determinism() {
        let ds = synth_blobs(2, 5, 2, 42);
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.label_histogram(&(0..10).collect::<Vec<_>>()), vec![5, 5]);
        let ds2 = synth_blobs(2, 5, 2, 42);
        assert_eq!(ds.features, ds2.features);
        assert_eq!(ds.labels, ds2.labels);
    }

    #[test]
    fn iid_preserves_histogram() {
        let ds = synth_blobs(2, 5, 2, 1);
        let p = partition_iid(&ds, &[4, 4], 7).unwrap();
        for indices in p.assignment.values() {
            assert_eq!(ds.label_histogram(indices), vec![2, 2]);
        }
    }

    #[test]
    fn iid_whole_dataset_single_client() {
        let ds = synth_blobs(3, 4, 2, 1);
        let p = partition_iid(&ds, &[12], 7).unwrap();
        assert_eq!(
            ds.label_histogram(&p.assignment[&0]),
            ds.label_histogram(&(0..12).collect::<Vec<_>>())
        );
        p.validate(ds.len()).unwrap();
    }

    #[test]
    fn iid_infeasible_sizes_rejected() {
        let ds = synth_blobs(2, 5, 2, 1);
        assert!(partition_iid(&ds, &[8, 8], 7).is_err());
    }

    #[test]
    fn shards_structure() {
        // 10 samples, labels 0..9: shard_size 2 → 5 shards, 3 clients
        let ds = LabeledDataset {
            features: vec![vec![0.0]; 10],
            labels: (0..10).collect(),
            class_count: 10,
        };
        let p = partition_shards(&ds, 3, 2, 4, 3).unwrap();
        let total: usize = p.assignment.values().map(|v| v.len()).sum();
        assert_eq!(total + p.dropped, 10);
        for indices in p.assignment.values() {
            assert!(!indices.is_empty());
            assert_eq!(indices.len() % 2, 0, "whole shards only");
        }
    }

    #[test]
    fn single_shard_single_client_owns_everything() {
        let ds = synth_blobs(2, 5, 2, 1);
        let p = partition_shards(&ds, 1, 10, 10, 0).unwrap();
        assert_eq!(p.assignment[&0].len(), 10);
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn larger_shards_mean_fewer_labels_per_client() {
        let ds = synth_blobs(10, 600, 2, 9);
        let count_labels = |p: &Partition| -> f64 {
            let mut total = 0usize;
            for indices in p.assignment.values() {
                let h = ds.label_histogram(indices);
                total += h.iter().filter(|&&c| c > 0).count();
            }
            total as f64 / p.n_clients() as f64
        };
        let small = partition_shards(&ds, 5, 60, 600, 11).unwrap();
        let large = partition_shards(&ds, 5, 300, 600, 11).unwrap();
        assert!(count_labels(&large) < count_labels(&small));
    }

    #[test]
    fn too_few_shards_rejected() {
        let ds = synth_blobs(2, 5, 2, 1);
        assert!(partition_shards(&ds, 6, 2, 2, 0).is_err());
    }

    #[test]
    fn handpick_mode() {
        let ds = LabeledDataset {
            features: vec![vec![0.0]; 6],
            labels: vec![0, 1, 2, 0, 1, 2],
            class_count: 3,
        };
        let p = partition_handpick(&ds, 2, &[vec![0, 2], vec![1]]).unwrap();
        assert_eq!(p.assignment[&0].len(), 4);
        assert_eq!(p.assignment[&1].len(), 2);
        assert!(partition_handpick(&ds, 2, &[vec![0], vec![0]]).is_err());
    }

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        // 2 images of 3x3
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&3u32.to_be_bytes());
        images.extend_from_slice(&3u32.to_be_bytes());
        images.extend((0..9).map(|i| i as u8));
        images.extend(std::iter::repeat(255u8).take(9));
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3u8, 7u8]);
        (images, labels)
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.features[0].len(), 9);
        assert_eq!(ds.features[1][0], 1.0, "byte 255 scales to 1.0");
        assert_eq!(ds.labels, vec![3, 7]);
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (images, mut labels) = idx_fixture();
        labels[7] = 3; // claim 3 labels
        labels.push(1);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(FedError::Ingestion { .. })));
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut images, labels) = idx_fixture();
        images[3] = 0x99;
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(FedError::Ingestion { offset: 0, .. })));
    }
}

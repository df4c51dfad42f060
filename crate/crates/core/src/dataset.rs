//! Writes a labelled "real" dataset rendered by the synthetic testbed.

use std::path::Path;

use rayon::prelude::*;

use crate::backend::synthetic::{SyntheticParams, SyntheticTestbed};
use crate::error::Result;
use crate::evaluation::protocol::shuffle_split;
use crate::io_util;
use crate::manifest::{Manifest, ManifestEntry, Split};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Renders `count` faces with ground-truth labels and a seeded train/test
/// split into `dir`. Returns the manifest path.
pub fn write_synthetic_dataset(
    params: &SyntheticParams,
    count: usize,
    seed: u64,
    train_fraction: f64,
    dir: &Path,
) -> Result<std::path::PathBuf> {
    let testbed = SyntheticTestbed::new(params.clone())?;
    io_util::ensure_dir(&dir.join("images"))?;
    let (_, test) = shuffle_split(count, train_fraction, seed);
    let names = &testbed.attribute_model().spec.names;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let id = format!("face-{i:05}");
            let code = testbed.sample_real_code(seed, i)?;
            let image = crate::backend::Generator::synthesize(&testbed, &code.to_f64())?;
            let rel = Path::new("images").join(format!("{id}.png"));
            image.save_png(&dir.join(&rel))?;
            let labels = names
                .iter()
                .cloned()
                .zip(testbed.labels_for_code(&code.to_f64()).into_iter().map(u8::from))
                .collect();
            Ok(ManifestEntry {
                id,
                path: rel,
                split: if test.binary_search(&i).is_ok() { Split::Test } else { Split::Train },
                labels: Some(labels),
                pseudo_labels: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(MANIFEST_FILE);
    Manifest::new(entries, dir)?.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_readable_and_labelled() {
        let d = tempfile::tempdir().unwrap();
        let p = write_synthetic_dataset(&SyntheticParams::default(), 10, 3, 0.8, d.path()).unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.entries.iter().filter(|e| e.split == Split::Test).count(), 2);
        assert_eq!(m.entries[0].labels.as_ref().unwrap().len(), 40);
        let im = crate::image::ImageTensor::load(&m.resolve(&m.entries[0])).unwrap();
        assert_eq!(im.height(), 12);
    }
}

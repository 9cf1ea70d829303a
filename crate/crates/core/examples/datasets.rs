//! Seeded Gaussian blobs and the IDX image format.

use mct::datasets::{
    DatasetConfig, encode_idx_images, encode_idx_labels, gen_blobs_train_val, load_idx, split,
};

fn main() -> mct::Result<()> {
    let (train, val) = gen_blobs_train_val(4, 500, 250, 16, 0.6, 0)?;
    println!("blobs: {} train / {} val, dim {}, class counts {:?}", train.len(), val.len(), train.feature_dim(), train.class_counts());
    assert_eq!(DatasetConfig::default().load()?.0, train);

    // a tiny 3x3 "image" file pair written to a temp dir and read back
    let dir = std::env::temp_dir().join(format!("mct-idx-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| mct::Error::io(&dir, e))?;
    let pixels: Vec<u8> = (0..6 * 9).map(|i| (i * 37 % 256) as u8).collect();
    let labels = [0u8, 1, 2, 0, 1, 2];
    let (img, lbl) = (dir.join("images.idx"), dir.join("labels.idx"));
    std::fs::write(&img, encode_idx_images(3, 3, &pixels)).map_err(|e| mct::Error::io(&img, e))?;
    std::fs::write(&lbl, encode_idx_labels(&labels)).map_err(|e| mct::Error::io(&lbl, e))?;
    let idx = load_idx(&img, &lbl, false)?;
    println!("idx: {} examples of dim {}, {} classes, first row {:?}", idx.len(), idx.feature_dim(), idx.num_classes(), idx.features().row(0));
    let (a, b) = split(&idx, 0.5, 7)?;
    println!("split: {} / {}", a.len(), b.len());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

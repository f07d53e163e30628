//! Generate a synthetic dataset, export it as PNGs, reload it, and round-trip a
//! perturbation set through disk.

use poisoncraft::data::{
    apply_perturbations, load_dataset, save_png_dir, subset_split, synthetic_dataset, DatasetFormat, PerturbationSet,
    SplitTag, SyntheticSpec,
};

pub fn run() -> poisoncraft::Result<()> {
    let out = std::env::temp_dir().join("poisoncraft-examples/synthetic-data");
    let spec = SyntheticSpec {
        samples: 40,
        classes: 4,
        shape: [3, 16, 16],
        world_seed: 0,
        sample_seed: 1,
        noise: 0.08,
    };
    let train = synthetic_dataset(&spec, SplitTag::Train)?;
    println!("{} samples of {:?}, {} classes, fingerprint {}", train.len(), train.shape(), train.classes(), &train.fingerprint()[..12]);

    let tenth = subset_split(&train, 0.1, 7)?;
    println!("10% subset: {:?}", tenth.ids());

    save_png_dir(&train, out.join("png"))?;
    let back = load_dataset(out.join("png"), DatasetFormat::PngDir)?;
    assert_eq!(back.images(), train.images(), "8-bit PNG export is lossless for quantized data");
    println!("png round trip: {} images in {}", back.len(), out.join("png").display());

    // A max-magnitude +eps everywhere; clamping keeps pixels in [0,1].
    let eps = 8.0 / 255.0;
    let mut set = PerturbationSet::zeros(&train, eps, "example".into(), 0);
    set.deltas.iter_mut().for_each(|d| *d = eps);
    let (payload, sidecar) = set.save(out.join("deltas"))?;
    let loaded = PerturbationSet::load(out.join("deltas"))?;
    assert_eq!(loaded.deltas, set.deltas);
    println!("saved {} and {}", payload.display(), sidecar.display());

    let poisoned = apply_perturbations(&train, &set)?;
    let moved = poisoned
        .images()
        .iter()
        .zip(train.images())
        .map(|(p, x)| (p - x).abs())
        .fold(0.0f32, f32::max);
    println!("largest pixel change after clamping: {moved:.5} (eps {eps:.5})");
    Ok(())
}

#[allow(dead_code)]
fn main() -> poisoncraft::Result<()> {
    run()
}

//! Synthetic source/target domains: channel statistics, export, and the
//! mIoU of a trivial all-background prediction.

use udanas::data::{channel_means, class_names, export_dataset, generate, miou, write_miou_csv, ShiftParams};

fn main() -> udanas::Result<()> {
    let d = generate(0, 40, 40, 16, 5, 32, ShiftParams::desk_default())?;
    let src = channel_means(d.source.iter().map(|s| &s.image));
    let tgt = channel_means(d.target_train.iter());
    println!("source RGB means {src:.3?}");
    println!("target RGB means {tgt:.3?}");

    let dir = std::env::temp_dir().join("udanas_synthetic_data");
    let manifest = export_dataset(&d, &dir)?;
    println!("exported {} source images to {} (digest {})", manifest.n_source, dir.display(), manifest.digest);

    let truth: Vec<usize> = d.target_eval.iter().flat_map(|s| s.label.iter().copied()).collect();
    let report = miou(&vec![0; truth.len()], &truth, d.num_classes)?;
    write_miou_csv(&report, &class_names(d.num_classes), std::io::stdout())?;
    Ok(())
}

//! Regenerates the synthetic fixture: `cargo run --example make_fixture -- <dir>`.

use std::fs;
use std::path::PathBuf;

use dualcond::fixture::{identity_spec, render_face, write_dataset, write_sidecar, BoxRecord};

fn main() -> dualcond::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/synthetic".into()));
    let identities = [(101, "ada"), (202, "bo"), (303, "cyd"), (404, "dee")];
    write_dataset(&dir.join("train"), &identities, 4, 96)?;

    // one unseen variant per identity, for personalization
    let holdout = dir.join("holdout");
    fs::create_dir_all(&holdout)?;
    let mut records = Vec::new();
    for (id, name) in identities {
        let (img, bbox) = render_face(&identity_spec(id), id * 1000 + 500, 96);
        let file = format!("{name}_ref.png");
        img.save_png(&holdout.join(&file))?;
        records.push(BoxRecord {
            image: file,
            bbox: [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
            identity: name.to_string(),
        });
    }
    write_sidecar(&holdout, &records)
}

//! Comparison panels: original, tampered, baseline mask and model mask
//! stacked top to bottom.

use image::{imageops, Rgb, RgbImage};
use maskforge::ingestion::ImagePair;
use maskforge::mask::Mask;
use maskforge::{Error, Result};

const GAP: u32 = 2;
const GAP_COLOUR: Rgb<u8> = Rgb([128, 128, 128]);

fn mask_rgb(mask: &Mask) -> RgbImage {
    RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        let v = if mask.is_white(x, y) { 255 } else { 0 };
        Rgb([v, v, v])
    })
}

pub fn render_panel(pair: &ImagePair, baseline: &Mask, model: &Mask) -> Result<RgbImage> {
    let (w, h) = pair.dims();
    for m in [baseline, model] {
        if m.dims() != (w, h) {
            return Err(Error::Shape { op: "render_panel", detail: format!("mask {:?} vs pair {:?}", m.dims(), (w, h)) });
        }
    }
    let rows = [pair.original.clone(), pair.tampered.clone(), mask_rgb(baseline), mask_rgb(model)];
    let total_h = rows.len() as u32 * h + (rows.len() as u32 - 1) * GAP;
    let mut out = RgbImage::from_pixel(w, total_h, GAP_COLOUR);
    for (i, row) in rows.iter().enumerate() {
        imageops::replace(&mut out, row, 0, i64::from(i as u32 * (h + GAP)));
    }
    Ok(out)
}

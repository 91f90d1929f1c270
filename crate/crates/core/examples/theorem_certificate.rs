//! Builds an image that a small delta plus a small flow reach together but
//! neither reaches alone, and re-checks it.
//!
//! cargo run --release --example theorem_certificate

use advcompose::imagecore::{Image, PixelCoord, Shape};
use advcompose::theory::{classify_contrast, theorem_witness, ContrastClass};

fn main() -> advcompose::Result<()> {
    // dark field with a bright right-hand column
    let img = Image::new(Shape::new(4, 4, 1), (0..16).map(|i| if i % 4 == 3 { 1.0 } else { 0.0 }).collect())?;
    let (delta, eps) = (8.0 / 255.0, 0.05);

    let mask = classify_contrast(&img, delta, eps)?;
    for row in 1..3 {
        for col in 1..3 {
            let class = mask.class(0, PixelCoord::new(row, col));
            let tag = match class {
                ContrastClass::Low => "low",
                ContrastClass::High => "high",
                ContrastClass::Neither => "-",
            };
            println!("({row}, {col}) {tag}");
        }
    }

    let cert = theorem_witness(&img, delta, eps)?;
    println!("delta {:+.4} at {:?}, flow {:?} at {:?}", cert.delta_applied, cert.p, cert.flow_at_q, cert.q);
    println!("change at p {:.4} > flow reach {:.4} (margin {:.4})", cert.change_p, cert.flow_bound_p, cert.margin_p);
    println!("change at q {:.4} > delta {:.4} (margin {:.4})", cert.change_q, cert.delta, cert.margin_q);
    println!("verified: {}", cert.verify(&img)?);
    Ok(())
}

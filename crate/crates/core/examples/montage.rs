//! Writes one phantom per cell for a few seeds as a single PNG.
use lphom_core::image_io::write_gray;
use lphom_core::label::ConditionLabel;
use lphom_core::phantom::generate_phantom;

fn main() -> lphom_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantoms.png".into());
    let size = 64;
    let seeds = [1u64, 2, 3];
    let (cols, rows) = (20, seeds.len());
    let mut canvas = vec![0.0f32; cols * size * rows * size];
    for (r, &seed) in seeds.iter().enumerate() {
        for label in ConditionLabel::all() {
            let img = generate_phantom(seed, label, size)?;
            let c = label.cell();
            for y in 0..size {
                for x in 0..size {
                    canvas[(r * size + y) * cols * size + c * size + x] = img.data()[y * size + x];
                }
            }
        }
    }
    write_gray(std::path::Path::new(&out), cols * size, rows * size, &canvas)
}

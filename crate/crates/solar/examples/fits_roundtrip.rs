//! Writes one small gradient at every BITPIX, reads each file back and
//! prints its size and header.

use ndarray::Array2;
use osdf_solar::fits::{read_fits, write_fits, Bitpix, Card, CardValue, FitsImage};

/// BITPIX code, file length, values equal after the round trip.
pub type Row = (i64, usize, bool);

pub fn run_example() -> Result<Vec<Row>, Box<dyn std::error::Error>> {
    let pixels = Array2::from_shape_fn((4, 6), |(r, c)| (10 * r + c) as f64);
    let mut out = Vec::new();
    for bitpix in Bitpix::ALL {
        let mut image = FitsImage::new(pixels.clone());
        image.header.push(Card::new("TELESCOP", CardValue::Text("BBSO GST".into())).with_comment("Big Bear"));
        image.header.push(Card::new("EXPTIME", CardValue::Real(0.025)));
        let bytes = write_fits(&image, bitpix)?;
        let back = read_fits(&bytes)?;
        let same = back.pixels == pixels;
        println!("BITPIX {:>3}: {:>5} bytes, {} blocks, values equal: {same}", bitpix.code(), bytes.len(), bytes.len() / 2880);
        out.push((bitpix.code(), bytes.len(), same));
        if bitpix == Bitpix::I16 {
            for card in back.header.user_cards() {
                println!("    {:<8} = {:?}", card.keyword, card.value);
            }
        }
    }
    Ok(out)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}

//! Netpbm export: binary PPM for color frames, plain PGM for saliency maps.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use crate::evalkit::SaliencyMap;
use crate::tensor::Tensor;

fn byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` in [0, 1] as P6.
pub fn ppm_bytes(rgb: &Tensor) -> io::Result<Vec<u8>> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = rgb.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(byte(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

/// Plain PGM with the unquantized grid carried in `#` comment lines, one
/// row per line, so the file is both viewable and exact.
pub fn saliency_pgm(map: &SaliencyMap) -> String {
    let mut s = String::from("P2\n# saliency f64 grid follows, row-major\n");
    for row in map.values.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "# {}", cells.join(" "));
    }
    let _ = writeln!(s, "{} {}\n255", map.width, map.height);
    for row in map.values.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|&v| byte(v).to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

/// Recovers the float grid from a file written by [`saliency_pgm`].
pub fn parse_saliency_pgm(text: &str) -> Option<SaliencyMap> {
    let mut lines = text.lines();
    if lines.next()? != "P2" {
        return None;
    }
    let mut values = Vec::new();
    let mut width = 0;
    let mut height = 0;
    for line in lines.by_ref().skip(1) {
        let Some(rest) = line.strip_prefix("# ") else {
            let mut it = line.split_whitespace();
            width = it.next()?.parse().ok()?;
            height = it.next()?.parse().ok()?;
            break;
        };
        for tok in rest.split_whitespace() {
            values.push(tok.parse().ok()?);
        }
    }
    (width * height == values.len() && width > 0).then_some(SaliencyMap { height, width, values })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()
}

/// Colors the newest frame of a navigation observation: walls gray, objects
/// in their class color, texture noise as a faint floor tint.
pub fn nav_frame_rgb(obs: &Tensor, n_classes: usize) -> Tensor {
    let s = obs.shape();
    let (h, w) = (s[1], s[2]);
    let per = n_classes + 3;
    let base = (s[0] / per - 1) * per;
    let d = obs.data();
    let at = |ch: usize, i: usize| d[(base + ch) * h * w + i];
    let mut out = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let tex = at(n_classes + 2, i);
        let mut rgb = [0.15 + 0.3 * tex, 0.15 + 0.3 * tex, 0.15 + 0.3 * tex];
        if at(0, i) > 0.0 {
            rgb = [0.55, 0.55, 0.55];
        }
        for k in 0..n_classes {
            let v = at(1 + k, i);
            if v > 0.0 {
                let c = crate::envs::CLASS_COLORS[k % crate::envs::CLASS_COLORS.len()];
                rgb = [c[0] * v, c[1] * v, c[2] * v];
            }
        }
        if i == (h / 2) * w + w / 2 {
            rgb = [1.0, 1.0, 1.0];
        }
        for ch in 0..3 {
            out[ch * h * w + i] = rgb[ch];
        }
    }
    Tensor::new(vec![3, h, w], out).expect("frame shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_length() {
        let t = Tensor::full(vec![3, 2, 5], 1.0);
        let b = ppm_bytes(&t).unwrap();
        assert!(b.starts_with(b"P6\n5 2\n255\n"));
        assert_eq!(b.len(), "P6\n5 2\n255\n".len() + 30);
    }

    #[test]
    fn pgm_keeps_exact_floats() {
        let m = SaliencyMap {
            height: 2,
            width: 3,
            values: vec![0.0, 1.0, 0.123456789012345, 0.5, 1e-17, 0.75],
        };
        let back = parse_saliency_pgm(&saliency_pgm(&m)).unwrap();
        assert_eq!(back.values, m.values);
        assert_eq!((back.height, back.width), (2, 3));
    }
}

//! Matrix output formats.

use stepground::Mat;

/// One line per row, values with six decimals, comma separated, no header.
pub fn matrix_to_csv(m: &Mat) -> String {
    let mut out = String::with_capacity(m.len() * 10);
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v:.6}"));
        }
        out.push('\n');
    }
    out
}

pub fn csv_to_matrix(text: &str) -> Result<Mat, String> {
    let rows = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
                .collect::<Result<Vec<f64>, String>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    if rows.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err("ragged rows".into());
    }
    Ok(Mat::from_rows(&rows))
}

/// Maps a similarity in [-1, 1] to a grey level, rounding half up.
pub fn pixel(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    (255.0 * (x + 1.0) / 2.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary greymap: one image row per matrix row.
pub fn matrix_to_pgm(m: &Mat) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.as_slice().iter().map(|&x| pixel(x)));
    out
}

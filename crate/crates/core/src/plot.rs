//! Minimal deterministic PNG plots: line charts, heatmaps and box plots.
//!
//! Rendering is done pixel by pixel with a tiny built-in digit font, so the
//! output bytes depend only on the data — no system fonts, no timestamps.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("Io: {0} ({1})")]
    Io(std::io::Error, String),
    #[error("Encode: {0}")]
    Encode(String),
    #[error("BadInput: {0}")]
    BadInput(String),
}

pub struct Canvas {
    w: usize,
    h: usize,
    pixels: Vec<u8>, // rgb
}

const BG: [u8; 3] = [255, 255, 255];
const FG: [u8; 3] = [30, 30, 30];
const GRID: [u8; 3] = [220, 220, 220];
pub const SERIES: [[u8; 3]; 4] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

impl Canvas {
    pub fn new(w: usize, h: usize) -> Self {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            pixels.extend_from_slice(&BG);
        }
        Canvas { w, h, pixels }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn hline(&mut self, x0: i64, x1: i64, y: i64, c: [u8; 3]) {
        for x in x0.min(x1)..=x0.max(x1) {
            self.put(x, y, c);
        }
    }

    pub fn vline(&mut self, x: i64, y0: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.put(x, y, c);
        }
    }

    pub fn rect_fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.hline(x0, x1, y, c);
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn marker(&mut self, x: i64, y: i64, c: [u8; 3]) {
        for dx in -2..=2i64 {
            for dy in -2..=2i64 {
                if dx.abs() + dy.abs() <= 2 {
                    self.put(x + dx, y + dy, c);
                }
            }
        }
    }

    /// 3x5 digit font scaled 1x; supports 0-9, '-', '.', 'e'.
    pub fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            let glyph = glyph(ch);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits & (1 << (2 - col)) != 0 {
                        self.put(cx + col as i64, y + row as i64, c);
                    }
                }
            }
            cx += 4;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PlotError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| PlotError::Io(e, parent.display().to_string()))?;
        }
        let file = std::fs::File::create(path)
            .map_err(|e| PlotError::Io(e, path.display().to_string()))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| PlotError::Encode(e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| PlotError::Encode(e.to_string()))?;
        Ok(())
    }
}

fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        'e' => [0b000, 0b111, 0b110, 0b100, 0b111],
        _ => [0b000; 5],
    }
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

struct Axes {
    x0: i64,
    y0: i64, // bottom-left in pixel coords
    x1: i64,
    y1: i64, // top-right
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Axes {
    fn px(&self, x: f64) -> i64 {
        let t = (x - self.xmin) / (self.xmax - self.xmin);
        self.x0 + (t * (self.x1 - self.x0) as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let t = (y - self.ymin) / (self.ymax - self.ymin);
        self.y0 - (t * (self.y0 - self.y1) as f64).round() as i64
    }
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.08;
        (lo - pad, hi + pad)
    }
}

/// Line plot with error bars: one series of (x, y, ±err).
pub fn line_plot(
    path: &Path,
    xs: &[f64],
    ys: &[f64],
    errs: Option<&[f64]>,
    y_hint: Option<(f64, f64)>,
) -> Result<(), PlotError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(PlotError::BadInput("xs/ys must be equal and non-empty".into()));
    }
    let (w, h) = (480usize, 320usize);
    let mut canvas = Canvas::new(w, h);
    let (xmin, xmax) = pad_range(
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let mut ylo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut yhi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if let Some(errs) = errs {
        for (y, e) in ys.iter().zip(errs) {
            ylo = ylo.min(y - e);
            yhi = yhi.max(y + e);
        }
    }
    if let Some((lo, hi)) = y_hint {
        ylo = ylo.min(lo);
        yhi = yhi.max(hi);
    }
    let (ymin, ymax) = pad_range(ylo, yhi);
    let ax = Axes { x0: 46, y0: h as i64 - 26, x1: w as i64 - 12, y1: 12, xmin, xmax, ymin, ymax };

    // Grid and ticks at the data x positions, 5 y ticks.
    for &x in xs {
        let px = ax.px(x);
        canvas.vline(px, ax.y1, ax.y0, GRID);
        canvas.text(px - 5, ax.y0 + 6, &fmt_tick(x), FG);
    }
    for i in 0..=4 {
        let y = ymin + (ymax - ymin) * i as f64 / 4.0;
        let py = ax.py(y);
        canvas.hline(ax.x0, ax.x1, py, GRID);
        canvas.text(4, py - 2, &fmt_tick(y), FG);
    }
    canvas.hline(ax.x0, ax.x1, ax.y0, FG);
    canvas.vline(ax.x0, ax.y1, ax.y0, FG);

    let color = SERIES[0];
    for i in 1..xs.len() {
        canvas.line(ax.px(xs[i - 1]), ax.py(ys[i - 1]), ax.px(xs[i]), ax.py(ys[i]), color);
    }
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        canvas.marker(ax.px(x), ax.py(y), color);
        if let Some(errs) = errs {
            let e = errs[i];
            canvas.vline(ax.px(x), ax.py(y - e), ax.py(y + e), color);
        }
    }
    canvas.save(path)
}

/// Heatmap of a rows×cols grid with numeric axis labels.
pub fn heatmap(
    path: &Path,
    grid: &[Vec<f64>],
    row_ticks: &[f64],
    col_ticks: &[f64],
) -> Result<(), PlotError> {
    let rows = grid.len();
    if rows == 0 || grid[0].is_empty() {
        return Err(PlotError::BadInput("empty grid".into()));
    }
    let cols = grid[0].len();
    if row_ticks.len() != rows || col_ticks.len() != cols {
        return Err(PlotError::BadInput("tick counts must match the grid".into()));
    }
    let cell = 36i64;
    let (ox, oy) = (40i64, 14i64);
    let w = ox + cell * cols as i64 + 60;
    let h = oy + cell * rows as i64 + 30;
    let mut canvas = Canvas::new(w as usize, h as usize);

    let lo = grid.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = (v - lo) / span;
            let color = viridis(t);
            let x0 = ox + c as i64 * cell;
            let y0 = oy + r as i64 * cell;
            canvas.rect_fill(x0, y0, x0 + cell - 2, y0 + cell - 2, color);
        }
    }
    for (c, &t) in col_ticks.iter().enumerate() {
        canvas.text(ox + c as i64 * cell + cell / 2 - 5, oy + cell * rows as i64 + 6, &fmt_tick(t), FG);
    }
    for (r, &t) in row_ticks.iter().enumerate() {
        canvas.text(6, oy + r as i64 * cell + cell / 2 - 2, &fmt_tick(t), FG);
    }
    // Colorbar with min/max labels.
    let bx = ox + cell * cols as i64 + 12;
    for i in 0..(cell * rows as i64) {
        let t = 1.0 - i as f64 / (cell * rows as i64 - 1) as f64;
        let color = viridis(t);
        canvas.hline(bx, bx + 10, oy + i, color);
    }
    canvas.text(bx + 14, oy, &fmt_tick(hi), FG);
    canvas.text(bx + 14, oy + cell * rows as i64 - 6, &fmt_tick(lo), FG);
    canvas.save(path)
}

/// Box plot: one box per group (median, quartiles, min/max whiskers).
pub fn box_plot(path: &Path, groups: &[(String, Vec<f64>)]) -> Result<(), PlotError> {
    if groups.is_empty() || groups.iter().any(|(_, v)| v.is_empty()) {
        return Err(PlotError::BadInput("every group needs data".into()));
    }
    let (w, h) = (120 + 56 * groups.len(), 320usize);
    let mut canvas = Canvas::new(w, h);
    let all: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
    let (ymin, ymax) = pad_range(
        all.iter().cloned().fold(f64::INFINITY, f64::min),
        all.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let ax = Axes {
        x0: 46,
        y0: h as i64 - 26,
        x1: w as i64 - 12,
        y1: 12,
        xmin: 0.0,
        xmax: groups.len() as f64,
        ymin,
        ymax,
    };
    for i in 0..=4 {
        let y = ymin + (ymax - ymin) * i as f64 / 4.0;
        let py = ax.py(y);
        canvas.hline(ax.x0, ax.x1, py, GRID);
        canvas.text(4, py - 2, &fmt_tick(y), FG);
    }
    canvas.hline(ax.x0, ax.x1, ax.y0, FG);
    canvas.vline(ax.x0, ax.y1, ax.y0, FG);

    for (g, (_, vals)) in groups.iter().enumerate() {
        let cx = ax.px(g as f64 + 0.5);
        let q1 = crate::stats::percentile(vals, 25.0);
        let q2 = crate::stats::percentile(vals, 50.0);
        let q3 = crate::stats::percentile(vals, 75.0);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let half = 16i64;
        let color = SERIES[g % SERIES.len()];
        canvas.vline(cx, ax.py(lo), ax.py(q1), FG);
        canvas.vline(cx, ax.py(q3), ax.py(hi), FG);
        canvas.hline(cx - half / 2, cx + half / 2, ax.py(lo), FG);
        canvas.hline(cx - half / 2, cx + half / 2, ax.py(hi), FG);
        for y in [q1, q3] {
            canvas.hline(cx - half, cx + half, ax.py(y), color);
        }
        canvas.vline(cx - half, ax.py(q1), ax.py(q3), color);
        canvas.vline(cx + half, ax.py(q1), ax.py(q3), color);
        canvas.hline(cx - half, cx + half, ax.py(q2), color);
        canvas.text(cx - 6, ax.y0 + 6, &fmt_tick(g as f64), FG);
    }
    canvas.save(path)
}

/// Compact viridis-like colormap on t in [0,1].
fn viridis(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    for w in stops.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return [
                (c0[0] + (c1[0] - c0[0]) * f).round() as u8,
                (c0[1] + (c1[1] - c0[1]) * f).round() as u8,
                (c0[2] + (c1[2] - c0[2]) * f).round() as u8,
            ];
        }
    }
    [253, 231, 37]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("impress-plot-{}-{}", std::process::id(), name))
    }

    #[test]
    fn plots_render_and_are_byte_deterministic() {
        let xs = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        let ys = [2.0, 2.5, 3.2, 4.0, 4.9, 5.5, 6.1];
        let errs = [0.2, 0.3, 0.25, 0.2, 0.3, 0.2, 0.4];
        let p1 = tmp("line.png");
        line_plot(&p1, &xs, &ys, Some(&errs), None).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        line_plot(&p1, &xs, &ys, Some(&errs), None).unwrap();
        assert_eq!(b1, std::fs::read(&p1).unwrap());
        assert!(b1.starts_with(&[0x89, b'P', b'N', b'G']));

        let grid: Vec<Vec<f64>> = (0..7)
            .map(|r| (0..7).map(|c| (r as f64 - c as f64) / 2.0).collect())
            .collect();
        let ticks = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        let p2 = tmp("heat.png");
        heatmap(&p2, &grid, &ticks, &ticks).unwrap();
        let h1 = std::fs::read(&p2).unwrap();
        heatmap(&p2, &grid, &ticks, &ticks).unwrap();
        assert_eq!(h1, std::fs::read(&p2).unwrap());

        let groups = vec![
            ("a".to_string(), vec![0.8, 0.85, 0.9, 0.95]),
            ("b".to_string(), vec![0.5, 0.6, 0.7]),
        ];
        let p3 = tmp("box.png");
        box_plot(&p3, &groups).unwrap();
        assert!(std::fs::read(&p3).unwrap().len() > 100);

        for p in [p1, p2, p3] {
            std::fs::remove_file(p).ok();
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(
            line_plot(&tmp("x.png"), &[], &[], None, None),
            Err(PlotError::BadInput(_))
        ));
        assert!(matches!(
            heatmap(&tmp("y.png"), &[], &[], &[]),
            Err(PlotError::BadInput(_))
        ));
        assert!(matches!(box_plot(&tmp("z.png"), &[]), Err(PlotError::BadInput(_))));
    }
}

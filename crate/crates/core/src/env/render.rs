//! Theme table and rasterizer.
//!
//! Geometry is expressed in cell-local coordinates `(u, v)` in `[0, 1)`,
//! measured from the top-left corner of the cell, so any observation size
//! works regardless of grid size. Pixel centres are sampled.
//!
//! | theme         | background              | grid lines   | goal marker | agent                      |
//! |---------------|-------------------------|--------------|-------------|----------------------------|
//! | Target        | flat (24, 24, 24)       | (72, 72, 72) | green inset | red upward triangle        |
//! | SourceVariant | checker (44,36,28)/(52,44,34) | (88, 76, 60) | green inset | red disc, radius 0.3 |
//! | Thermal       | flat 16 (grayscale)     | none         | none        | Gaussian blob, radius 0.6 cells |

use super::{Cell, EnvState, GridConfig, Observation, Theme};

/// Agent glyph shapes available to themes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Glyph {
    Triangle,
    Disc { radius: f64 },
    /// Additive bright blob with Gaussian falloff; `radius` is in cell widths
    /// and equals two standard deviations.
    Blob { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThemeStyle {
    pub theme: Theme,
    pub background: [u8; 3],
    /// Second background tone laid out as a per-cell checkerboard.
    pub checker: Option<[u8; 3]>,
    pub grid_line: Option<[u8; 3]>,
    pub goal: Option<[u8; 3]>,
    pub agent: [u8; 3],
    pub glyph: Glyph,
}

pub const THEME_TABLE: [ThemeStyle; 3] = [
    ThemeStyle {
        theme: Theme::Target,
        background: [24, 24, 24],
        checker: None,
        grid_line: Some([72, 72, 72]),
        goal: Some([40, 200, 60]),
        agent: [220, 40, 40],
        glyph: Glyph::Triangle,
    },
    ThemeStyle {
        theme: Theme::SourceVariant,
        background: [44, 36, 28],
        checker: Some([52, 44, 34]),
        grid_line: Some([88, 76, 60]),
        goal: Some([40, 200, 60]),
        agent: [220, 40, 40],
        glyph: Glyph::Disc { radius: 0.3 },
    },
    ThemeStyle {
        theme: Theme::Thermal,
        background: [16, 16, 16],
        checker: None,
        grid_line: None,
        goal: None,
        agent: [250, 250, 250],
        glyph: Glyph::Blob { radius: 0.6 },
    },
];

impl ThemeStyle {
    pub fn of(theme: Theme) -> &'static ThemeStyle {
        THEME_TABLE
            .iter()
            .find(|s| s.theme == theme)
            .expect("every theme has a table entry")
    }
}

fn in_triangle(u: f64, v: f64) -> bool {
    // Apex at (0.2, 0.5), base from (0.8, 0.2) to (0.8, 0.8).
    (0.2..=0.8).contains(&u) && (v - 0.5).abs() <= 0.3 * (u - 0.2) / 0.6
}

pub fn render(state: &EnvState, config: &GridConfig) -> Observation {
    let style = ThemeStyle::of(config.theme);
    let (h, w) = (config.obs_height, config.obs_width);
    let cell_h = h as f64 / config.rows as f64;
    let cell_w = w as f64 / config.cols as f64;
    let row_of = |y: usize| (((y as f64 + 0.5) / cell_h) as usize).min(config.rows - 1);
    let col_of = |x: usize| (((x as f64 + 0.5) / cell_w) as usize).min(config.cols - 1);
    let agent = state.agent_cell;
    let mut pixels = vec![0u8; h * w * 3];

    for y in 0..h {
        let r = row_of(y);
        let u = (y as f64 + 0.5) / cell_h - r as f64;
        let line_y = y + 1 < h && row_of(y + 1) != r;
        for x in 0..w {
            let c = col_of(x);
            let v = (x as f64 + 0.5) / cell_w - c as f64;
            let line_x = x + 1 < w && col_of(x + 1) != c;
            let cell = Cell(r, c);

            let mut rgb = match style.checker {
                Some(alt) if (r + c) % 2 == 1 => alt,
                _ => style.background,
            };
            if let Some(line) = style.grid_line {
                if line_x || line_y {
                    rgb = line;
                }
            }
            if let Some(goal) = style.goal {
                if cell == config.goal_cell && (0.1..0.9).contains(&u) && (0.1..0.9).contains(&v) {
                    rgb = goal;
                }
            }
            match style.glyph {
                Glyph::Triangle => {
                    if cell == agent && in_triangle(u, v) {
                        rgb = style.agent;
                    }
                }
                Glyph::Disc { radius } => {
                    if cell == agent && (u - 0.5).powi(2) + (v - 0.5).powi(2) <= radius * radius {
                        rgb = style.agent;
                    }
                }
                Glyph::Blob { radius } => {
                    // Distance in cell widths from the agent's cell centre.
                    let dy = (y as f64 + 0.5) / cell_h - (agent.0 as f64 + 0.5);
                    let dx = (x as f64 + 0.5) / cell_w - (agent.1 as f64 + 0.5);
                    let sigma = radius / 2.0;
                    let heat = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    for k in 0..3 {
                        let lo = rgb[k] as f64;
                        let hi = style.agent[k] as f64;
                        rgb[k] = (lo + (hi - lo) * heat).round() as u8;
                    }
                }
            }
            let i = (y * w + x) * 3;
            pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    Observation {
        height: h,
        width: w,
        pixels: pixels.into(),
    }
}

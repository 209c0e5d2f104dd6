//! Rendered frames are compared pixel-for-pixel against PNG fixtures.
//! Set `AWPO_BLESS=1` to rewrite the fixtures after an intended change to
//! the theme table.

use std::path::PathBuf;

use awpo::env::{Cell, EnvState, GridConfig, GridEnv, Theme};

const CASES: [(Theme, Cell, &str); 6] = [
    (Theme::Target, Cell(0, 0), "target_start"),
    (Theme::Target, Cell(2, 3), "target_r2c3"),
    (Theme::SourceVariant, Cell(0, 0), "source_start"),
    (Theme::SourceVariant, Cell(3, 1), "source_r3c1"),
    (Theme::Thermal, Cell(0, 0), "thermal_start"),
    (Theme::Thermal, Cell(4, 2), "thermal_r4c2"),
];

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.png"))
}

#[test]
fn frames_match_png_fixtures() {
    let bless = std::env::var_os("AWPO_BLESS").is_some();
    for (theme, cell, name) in CASES {
        let env = GridEnv::new(GridConfig::default().with_theme(theme)).unwrap();
        let obs = env.render(&EnvState {
            agent_cell: cell,
            steps_taken: 0,
        });
        let path = fixture(name);
        if bless {
            image::save_buffer(&path, &obs.pixels, 64, 64, image::ColorType::Rgb8).unwrap();
            continue;
        }
        let want = image::open(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())).to_rgb8();
        assert_eq!(want.dimensions(), (64, 64), "{name}");
        let diff = want.as_raw().iter().zip(obs.pixels.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 0, "{name}: {diff} bytes differ");
    }
}

#[test]
fn step_counter_does_not_change_the_frame() {
    let env = GridEnv::new(GridConfig::default()).unwrap();
    let a = env.render(&EnvState {
        agent_cell: Cell(1, 1),
        steps_taken: 0,
    });
    let b = env.render(&EnvState {
        agent_cell: Cell(1, 1),
        steps_taken: 300,
    });
    assert_eq!(a, b);
}

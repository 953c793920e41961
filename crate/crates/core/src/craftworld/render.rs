use super::{CellObject, GridState, Pos, GRID_HEIGHT, GRID_WIDTH};

pub const CELL_PX: usize = 3;
pub const OBS_HEIGHT: usize = GRID_HEIGHT * CELL_PX + CELL_PX;
pub const OBS_WIDTH: usize = GRID_WIDTH * CELL_PX;
pub const OBS_CHANNELS: usize = 3;
pub const OBS_LEN: usize = OBS_CHANNELS * OBS_HEIGHT * OBS_WIDTH;

const AGENT_COLOR: [u8; 3] = [255, 255, 255];
const HELD_COLOR: [u8; 3] = [255, 255, 255];

pub fn color(obj: CellObject) -> [u8; 3] {
    match obj {
        CellObject::Empty => [0, 0, 0],
        CellObject::Tree => [0, 128, 0],
        CellObject::Rock => [128, 128, 128],
        CellObject::Logs => [139, 69, 19],
        CellObject::Wheat => [218, 165, 32],
        CellObject::Bread => [255, 220, 100],
        CellObject::Hammer => [80, 80, 255],
        CellObject::Axe => [200, 60, 60],
        CellObject::House => [255, 140, 0],
    }
}

/// 8-bit RGB image stored channel-planar (`[3][33][30]`).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    data: Box<[u8]>,
}

impl std::fmt::Debug for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Observation({}x{}x{})", OBS_HEIGHT, OBS_WIDTH, OBS_CHANNELS)
    }
}

impl Observation {
    pub fn black() -> Observation {
        Observation { data: vec![0u8; OBS_LEN].into_boxed_slice() }
    }

    pub fn from_planes(data: Vec<u8>) -> Option<Observation> {
        (data.len() == OBS_LEN).then(|| Observation { data: data.into_boxed_slice() })
    }

    pub fn planes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let plane = OBS_HEIGHT * OBS_WIDTH;
        let i = row * OBS_WIDTH + col;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let plane = OBS_HEIGHT * OBS_WIDTH;
        let i = row * OBS_WIDTH + col;
        for (ch, v) in rgb.into_iter().enumerate() {
            self.data[ch * plane + i] = v;
        }
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", OBS_WIDTH, OBS_HEIGHT).into_bytes();
        out.reserve(OBS_LEN);
        for r in 0..OBS_HEIGHT {
            for c in 0..OBS_WIDTH {
                out.extend_from_slice(&self.pixel(r, c));
            }
        }
        out
    }
}

pub fn render(state: &GridState) -> Observation {
    let mut obs = Observation::black();
    for r in 0..GRID_HEIGHT {
        for c in 0..GRID_WIDTH {
            let rgb = color(state.cell(Pos::new(r, c)));
            if rgb == [0, 0, 0] {
                continue;
            }
            for dr in 0..CELL_PX {
                for dc in 0..CELL_PX {
                    obs.put(r * CELL_PX + dr, c * CELL_PX + dc, rgb);
                }
            }
        }
    }
    let a = state.agent();
    obs.put(a.row * CELL_PX + 1, a.col * CELL_PX + 1, AGENT_COLOR);
    if state.held().is_some() {
        let top = GRID_HEIGHT * CELL_PX;
        for dr in 0..CELL_PX {
            for dc in 0..CELL_PX {
                obs.put(top + dr, dc, HELD_COLOR);
            }
        }
    }
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::craftworld::Holdable;

    #[test]
    fn empty_grid_agent_in_corner() {
        let s = GridState::empty(Pos::new(0, 0));
        let img = render(&s);
        assert_eq!(img.planes().len(), 33 * 30 * 3);
        for r in 0..OBS_HEIGHT {
            for c in 0..OBS_WIDTH {
                let want = if (r, c) == (1, 1) { AGENT_COLOR } else { [0, 0, 0] };
                assert_eq!(img.pixel(r, c), want, "({r},{c})");
            }
        }
    }

    #[test]
    fn held_indicator_is_the_only_difference() {
        let s = GridState::empty(Pos::new(0, 0));
        let mut h = s.clone();
        h.set_held(Some(Holdable::Axe));
        let (a, b) = (render(&s), render(&h));
        for r in 0..OBS_HEIGHT {
            for c in 0..OBS_WIDTH {
                let in_block = (30..33).contains(&r) && c < 3;
                if in_block {
                    assert_eq!(b.pixel(r, c), [255, 255, 255]);
                    assert_eq!(a.pixel(r, c), [0, 0, 0]);
                } else {
                    assert_eq!(a.pixel(r, c), b.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn palette_is_injective() {
        let mut seen: Vec<[u8; 3]> = CellObject::ALL.iter().map(|&o| color(o)).collect();
        seen.push(AGENT_COLOR);
        let n = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn render_is_deterministic_and_ppm_sized() {
        let mut s = GridState::empty(Pos::new(4, 7));
        s.set_cell(Pos::new(1, 1), CellObject::Tree);
        assert_eq!(render(&s), render(&s));
        let ppm = render(&s).to_ppm();
        assert!(ppm.starts_with(b"P6\n30 33\n255\n"));
        assert_eq!(ppm.len(), b"P6\n30 33\n255\n".len() + OBS_LEN);
        assert_eq!(render(&s).pixel(4, 4), [0, 128, 0]);
    }
}

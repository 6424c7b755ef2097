//! Sprites, rendering and the closed-loop simulator.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};

pub const CANVAS: usize = 64;
/// Pixels moved per unit of normalized action.
pub const MAX_STEP: i32 = 4;
pub const GRIPPER_SIZE: i32 = 8;
pub const BACKGROUND: [u8; 3] = [26, 26, 26];
pub const GRIPPER_COLOR: [u8; 3] = [180, 180, 180];

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [230, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 210, 40]),
    ("purple", [160, 60, 200]),
    ("cyan", [40, 200, 210]),
    ("orange", [240, 140, 30]),
    ("white", [235, 235, 235]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 7] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Ring,
        Shape::Bar,
    ];

    pub fn noun(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
        }
    }

    /// Whether pixel `(x, y)` of an `s × s` sprite is filled.
    pub fn covers(self, x: i32, y: i32, s: i32) -> bool {
        let sf = s as f64;
        let (cx, cy) = (x as f64 + 0.5 - sf / 2.0, y as f64 + 0.5 - sf / 2.0);
        let r = sf / 2.0;
        match self {
            Shape::Square => true,
            Shape::Circle => cx * cx + cy * cy <= r * r,
            Shape::Triangle => cx.abs() <= (y as f64 + 1.0) / sf * r,
            Shape::Diamond => cx.abs() + cy.abs() <= r,
            Shape::Cross => cx.abs() <= sf / 6.0 + 0.5 || cy.abs() <= sf / 6.0 + 0.5,
            Shape::Ring => {
                let d = cx * cx + cy * cy;
                d <= r * r && d >= (r * 0.45) * (r * 0.45)
            }
            Shape::Bar => cy.abs() <= sf / 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
    Distractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub id: String,
    pub shape: Shape,
    pub color: usize,
    pub role: Role,
    /// Top-left corner.
    pub x: i32,
    pub y: i32,
    pub size: i32,
}

impl Sprite {
    pub fn noun(&self) -> &'static str {
        self.shape.noun()
    }

    pub fn rgb(&self) -> [u8; 3] {
        COLORS[self.color].1
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn center(&self) -> (i32, i32) {
        (self.x + self.size / 2, self.y + self.size / 2)
    }

    /// Full (unoccluded) extent as `[x1, y1, x2, y2)` pixels.
    pub fn extent(&self) -> [i32; 4] {
        [self.x, self.y, self.x + self.size, self.y + self.size]
    }

    pub fn pixels(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (0..self.size).flat_map(move |dy| {
            (0..self.size)
                .filter(move |&dx| self.shape.covers(dx, dy, self.size))
                .map(move |dx| (self.x + dx, self.y + dy))
        })
    }
}

/// One rendered frame: RGB bytes plus the visible-owner map.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub rgb: Vec<u8>,
    /// Index into `scene.sprites` or `sprites.len()` for the gripper; `None` is background.
    pub owner: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sprites: Vec<Sprite>,
    pub gripper: (i32, i32),
    pub closed: bool,
    pub held: Option<usize>,
    /// Offset of the held sprite's top-left from the gripper centre.
    pub grasp_offset: (i32, i32),
    pub released: bool,
    pub gripper_instance: bool,
}

impl Scene {
    pub fn source(&self) -> usize {
        self.sprites.iter().position(|s| s.role == Role::Source).expect("scene has a source")
    }

    pub fn target(&self) -> usize {
        self.sprites.iter().position(|s| s.role == Role::Target).expect("scene has a target")
    }

    /// Gripper-held sprites are drawn after every other sprite; the gripper outline is on top.
    pub fn render(&self) -> Render {
        let n = CANVAS * CANVAS;
        let mut rgb = Vec::with_capacity(n * 3);
        for _ in 0..n {
            rgb.extend_from_slice(&BACKGROUND);
        }
        let mut owner = vec![None; n];
        let mut order: Vec<usize> = (0..self.sprites.len()).filter(|&i| Some(i) != self.held).collect();
        order.extend(self.held);
        let mut paint = |x: i32, y: i32, c: [u8; 3], who: usize| {
            if (0..CANVAS as i32).contains(&x) && (0..CANVAS as i32).contains(&y) {
                let p = y as usize * CANVAS + x as usize;
                rgb[p * 3..p * 3 + 3].copy_from_slice(&c);
                owner[p] = Some(who);
            }
        };
        for i in order {
            let s = &self.sprites[i];
            for (x, y) in s.pixels() {
                paint(x, y, s.rgb(), i);
            }
        }
        let [x1, y1, x2, y2] = self.gripper_extent();
        for y in y1..y2 {
            for x in x1..x2 {
                if x == x1 || y == y1 || x == x2 - 1 || y == y2 - 1 {
                    paint(x, y, GRIPPER_COLOR, self.sprites.len());
                }
            }
        }
        Render { rgb, owner }
    }

    pub fn gripper_extent(&self) -> [i32; 4] {
        let h = GRIPPER_SIZE / 2;
        let (gx, gy) = self.gripper;
        [gx - h, gy - h, gx + h, gy + h]
    }

    pub fn grip_state(&self) -> f64 {
        if self.closed {
            1.0
        } else {
            -1.0
        }
    }

    /// `[x, y, z, open/close]` with positions normalized by the canvas size.
    pub fn proprio(&self) -> [f64; 4] {
        [
            self.gripper.0 as f64 / CANVAS as f64,
            self.gripper.1 as f64 / CANVAS as f64,
            0.0,
            self.grip_state(),
        ]
    }

    /// Applies one normalized 7-d action. Gripper changes take effect before motion.
    pub fn step(&mut self, action: &[f64; 7]) -> Result<()> {
        if self.released {
            return Err(WorldError::Simulation("episode already finished".into()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(WorldError::Simulation("non-finite action".into()));
        }
        let close = action[6] > 0.0;
        if close && !self.closed {
            self.closed = true;
            self.held = self.grasp_candidate();
            if let Some(h) = self.held {
                let s = &self.sprites[h];
                self.grasp_offset = (s.x - self.gripper.0, s.y - self.gripper.1);
            }
        } else if !close && self.closed {
            self.closed = false;
            if self.held.take().is_some() {
                self.released = true;
            }
        }
        let dx = (action[0].clamp(-1.0, 1.0) * MAX_STEP as f64).round() as i32;
        let dy = (action[1].clamp(-1.0, 1.0) * MAX_STEP as f64).round() as i32;
        let lim = (GRIPPER_SIZE / 2, CANVAS as i32 - GRIPPER_SIZE / 2);
        self.gripper = (
            (self.gripper.0 + dx).clamp(lim.0, lim.1),
            (self.gripper.1 + dy).clamp(lim.0, lim.1),
        );
        if let Some(h) = self.held {
            let (ox, oy) = self.grasp_offset;
            self.sprites[h].x = self.gripper.0 + ox;
            self.sprites[h].y = self.gripper.1 + oy;
        }
        Ok(())
    }

    /// Topmost sprite whose visible pixels include the gripper centre.
    fn grasp_candidate(&self) -> Option<usize> {
        let (gx, gy) = self.gripper;
        let r = self.render();
        if !(0..CANVAS as i32).contains(&gx) || !(0..CANVAS as i32).contains(&gy) {
            return None;
        }
        let hit = r.owner[gy as usize * CANVAS + gx as usize];
        if let Some(i) = hit.filter(|&i| i < self.sprites.len()) {
            return Some(i);
        }
        // The outline itself never covers the centre, but a sprite underneath
        // may extend under it.
        self.sprites
            .iter()
            .enumerate()
            .rev()
            .find(|(_, s)| {
                let [x1, y1, x2, y2] = s.extent();
                (x1..x2).contains(&gx) && (y1..y2).contains(&gy)
            })
            .map(|(i, _)| i)
    }

    /// Source centre inside the target's full extent.
    pub fn success(&self) -> bool {
        let (cx, cy) = self.sprites[self.source()].center();
        let [x1, y1, x2, y2] = self.sprites[self.target()].extent();
        (x1..x2).contains(&cx) && (y1..y2).contains(&cy)
    }
}

//! Parametric toy scenes: one colored shape on a solid background.
//!
//! Scenes render deterministically to 32x32 RGB images and describe
//! themselves in a closed vocabulary, so ground-truth edit masks and prompt
//! token indices are known exactly.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::LatentGrid;
use crate::scalar::Scalar;

/// Rendered image height and width in pixels.
pub const IMAGE_SIZE: usize = 32;
/// RGB.
pub const CHANNELS: usize = 3;

/// Null (unconditional) token.
pub const NULL_TOKEN: &str = "<null>";
/// Out-of-vocabulary token.
pub const UNK_TOKEN: &str = "<unk>";

/// Closed vocabulary, in fixed order; token tables index into this.
pub const VOCABULARY: &[&str] = &[
    NULL_TOKEN, UNK_TOKEN, "a", "in", "the", "on", "background", "small", "large", "red", "green",
    "blue", "yellow", "cyan", "magenta", "white", "gray", "square", "circle", "triangle",
    "northwest", "north", "northeast", "west", "center", "east", "southwest", "south", "southeast",
];

/// Index of a word in [`VOCABULARY`], or of the unknown token.
pub fn token_index(word: &str) -> usize {
    VOCABULARY.iter().position(|w| *w == word).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Gray,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Gray,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Gray => "gray",
        }
    }

    /// RGB in `[0, 1]`.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.10, 0.10],
            Color::Green => [0.10, 0.80, 0.15],
            Color::Blue => [0.15, 0.20, 0.85],
            Color::Yellow => [0.90, 0.85, 0.10],
            Color::Cyan => [0.10, 0.80, 0.80],
            Color::Magenta => [0.85, 0.15, 0.80],
            Color::White => [0.95, 0.95, 0.95],
            Color::Gray => [0.50, 0.50, 0.50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Northwest,
    North,
    Northeast,
    West,
    Center,
    East,
    Southwest,
    South,
    Southeast,
}

impl Position {
    pub const ALL: [Position; 9] = [
        Position::Northwest,
        Position::North,
        Position::Northeast,
        Position::West,
        Position::Center,
        Position::East,
        Position::Southwest,
        Position::South,
        Position::Southeast,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Position::Northwest => "northwest",
            Position::North => "north",
            Position::Northeast => "northeast",
            Position::West => "west",
            Position::Center => "center",
            Position::East => "east",
            Position::Southwest => "southwest",
            Position::South => "south",
            Position::Southeast => "southeast",
        }
    }

    /// `(row, col)` of the shape center.
    pub fn center(self) -> (i32, i32) {
        let coord = |third: usize| [6, 16, 26][third] as i32;
        let (r, c) = match self {
            Position::Northwest => (0, 0),
            Position::North => (0, 1),
            Position::Northeast => (0, 2),
            Position::West => (1, 0),
            Position::Center => (1, 1),
            Position::East => (1, 2),
            Position::Southwest => (2, 0),
            Position::South => (2, 1),
            Position::Southeast => (2, 2),
        };
        (coord(r), coord(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectSize {
    Small,
    Large,
}

impl ObjectSize {
    pub const ALL: [ObjectSize; 2] = [ObjectSize::Small, ObjectSize::Large];

    pub fn word(self) -> &'static str {
        match self {
            ObjectSize::Small => "small",
            ObjectSize::Large => "large",
        }
    }

    /// Shape half-extent in pixels.
    pub fn radius(self) -> i32 {
        match self {
            ObjectSize::Small => 4,
            ObjectSize::Large => 7,
        }
    }
}

/// One colored shape on a solid background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: ObjectSize,
    pub background: Color,
}

impl SceneSpec {
    /// Fixed-template description; every field maps to exactly one token.
    pub fn describe(&self) -> String {
        format!(
            "a {} {} {} in the {} on a {} background",
            self.size.word(),
            self.color.word(),
            self.shape.word(),
            self.position.word(),
            self.background.word()
        )
    }

    /// Token positions of the object's color and shape words in
    /// [`SceneSpec::describe`] output.
    pub const OBJECT_TOKEN_INDICES: [usize; 2] = [2, 3];
    /// Token position of the background color word.
    pub const BACKGROUND_TOKEN_INDEX: usize = 9;

    /// True where the object covers pixel `(row, col)`.
    fn covers(&self, row: usize, col: usize) -> bool {
        let (cy, cx) = self.position.center();
        let r = self.size.radius();
        let dy = row as i32 - cy;
        let dx = col as i32 - cx;
        match self.shape {
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Circle => dy * dy + dx * dx <= r * r,
            // Upward-pointing: apex at the top row, width growing downward.
            Shape::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }

    /// Binary object mask at image resolution.
    pub fn object_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE), |(r, c)| self.covers(r, c))
    }

    /// Deterministic hard-edged render, values in `[0, 1]`.
    pub fn render<S: Scalar>(&self) -> LatentGrid<S> {
        let fg = self.color.rgb();
        let bg = self.background.rgb();
        let data = Array3::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE, CHANNELS), |(r, c, ch)| {
            let rgb = if self.covers(r, c) { fg } else { bg };
            S::from_real(rgb[ch])
        });
        LatentGrid::from(data)
    }

    /// A uniformly random scene whose object and background colors differ.
    pub fn random(rng: &mut impl Rng) -> Self {
        let color = *Color::ALL.choose(rng).expect("non-empty");
        let background = loop {
            let b = *Color::ALL.choose(rng).expect("non-empty");
            if b != color {
                break b;
            }
        };
        SceneSpec {
            shape: *Shape::ALL.choose(rng).expect("non-empty"),
            color,
            position: *Position::ALL.choose(rng).expect("non-empty"),
            size: *ObjectSize::ALL.choose(rng).expect("non-empty"),
            background,
        }
    }
}

/// What an edit changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    ChangeColor,
    ChangeShape,
    ChangeBackground,
}

impl EditKind {
    pub const ALL: [EditKind; 3] = [EditKind::ChangeColor, EditKind::ChangeShape, EditKind::ChangeBackground];
}

/// A source scene, the edited scene, and what kind of edit links them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCase {
    pub source: SceneSpec,
    pub target: SceneSpec,
    pub kind: EditKind,
}

impl EditCase {
    /// Derive a random edit of `kind` from `source`.
    pub fn random(source: SceneSpec, kind: EditKind, rng: &mut impl Rng) -> Self {
        let mut target = source;
        match kind {
            EditKind::ChangeColor => {
                target.color = loop {
                    let c = *Color::ALL.choose(rng).expect("non-empty");
                    if c != source.color && c != source.background {
                        break c;
                    }
                };
            }
            EditKind::ChangeShape => {
                target.shape = loop {
                    let s = *Shape::ALL.choose(rng).expect("non-empty");
                    if s != source.shape {
                        break s;
                    }
                };
            }
            EditKind::ChangeBackground => {
                target.background = loop {
                    let c = *Color::ALL.choose(rng).expect("non-empty");
                    if c != source.background && c != source.color {
                        break c;
                    }
                };
            }
        }
        EditCase { source, target, kind }
    }

    pub fn source_prompt(&self) -> String {
        self.source.describe()
    }

    pub fn target_prompt(&self) -> String {
        self.target.describe()
    }

    /// Token positions (shared by both prompts) that name the edited region.
    pub fn edited_token_indices(&self) -> Vec<usize> {
        match self.kind {
            EditKind::ChangeColor | EditKind::ChangeShape => SceneSpec::OBJECT_TOKEN_INDICES.to_vec(),
            EditKind::ChangeBackground => vec![SceneSpec::BACKGROUND_TOKEN_INDEX],
        }
    }

    /// Ground-truth pixels the edit is allowed to change.
    ///
    /// Shape changes cover the union of the old and new object; background
    /// changes cover everything outside the object.
    pub fn ground_truth_mask(&self) -> Array2<bool> {
        let src = self.source.object_mask();
        match self.kind {
            EditKind::ChangeColor => src,
            EditKind::ChangeShape => {
                let tgt = self.target.object_mask();
                Array2::from_shape_fn(src.dim(), |idx| src[idx] || tgt[idx])
            }
            EditKind::ChangeBackground => src.mapv(|m| !m),
        }
    }
}

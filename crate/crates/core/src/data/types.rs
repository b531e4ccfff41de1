use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Caption,
    Subtitle,
    PersonInfo,
    Others,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [
        Label::Caption,
        Label::Subtitle,
        Label::PersonInfo,
        Label::Others,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Caption => "caption",
            Label::Subtitle => "subtitle",
            Label::PersonInfo => "person_info",
            Label::Others => "others",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Standard,
    Generalization,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Standard, Split::Generalization];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Standard => "standard",
            Split::Generalization => "generalization",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

/// Upper-left and bottom-right corners as fractions of frame width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoords {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCoords {
    pub const FULL_FRAME: BoxCoords = BoxCoords {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && 0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= 1.0
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid box {:?}", self.to_array())))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x0: a[0],
            y0: a[1],
            x1: a[2],
            y1: a[3],
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBox {
    pub coords: BoxCoords,
    /// Token ids padded to the configured length.
    pub tokens: Vec<u32>,
    pub raw_text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    /// `3 × H × W`, values in `[0, 1]`.
    pub frame: Tensor,
    pub boxes: Vec<TextBox>,
    pub split: Split,
    pub program_id: u32,
}

pub const MAX_BOXES: usize = 16;

impl FrameSample {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.frame.shape() != [3, height, width] {
            return Err(Error::Data(format!(
                "frame shape {:?} does not match configured 3x{height}x{width}",
                self.frame.shape()
            )));
        }
        if self.boxes.is_empty() || self.boxes.len() > MAX_BOXES {
            return Err(Error::Data(format!(
                "frame has {} boxes; expected 1..={MAX_BOXES}",
                self.boxes.len()
            )));
        }
        for b in &self.boxes {
            b.coords.validate()?;
            if b.tokens.is_empty() {
                return Err(Error::Data("text box without tokens".into()));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.boxes.iter().map(|b| b.label.index()).collect()
    }
}

//! Deterministic bitmap rendering of LaTeX token sequences.
//!
//! A small hand-drawn glyph atlas plus layout rules for superscripts,
//! subscripts, and fractions. Rendering is a pure function of the token
//! list, which makes pixel-exact comparison meaningful without a LaTeX
//! toolchain. An external-command adapter is provided for real renderers.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};
use crate::segmentation::{
    label_components, BinaryMask, BoundingBox, Connectivity, GrayImage,
};
use crate::token::{Token, TokenKind};

/// Vertical shift applied to superscript / subscript boxes.
const SCRIPT_SHIFT: i32 = 3;
/// Horizontal gap between adjacent boxes; two columns keep placed glyph
/// components disjoint under 8-connectivity.
const GLYPH_SPACING: i32 = 2;
/// Row the fraction bar is centered on (the minus-sign row).
const AXIS_ROW: i32 = 5;
/// Blank margin around rendered images.
const MARGIN: i32 = 3;

struct GlyphDef {
    /// Row offset of the bitmap inside the 12-row line box.
    top: i32,
    rows: &'static [&'static str],
}

fn glyph_table() -> &'static HashMap<&'static str, GlyphDef> {
    use std::sync::OnceLock;
    static TABLE: OnceLock<HashMap<&'static str, GlyphDef>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut m = HashMap::new();
        m.insert(
            "0",
            GlyphDef {
                top: 1,
                rows: &[
                    ".###.", "#...#", "#...#", "#...#", "#...#", "#...#", "#...#", "#...#",
                    ".###.",
                ],
            },
        );
        m.insert(
            "1",
            GlyphDef {
                top: 1,
                rows: &[".#.", "##.", ".#.", ".#.", ".#.", ".#.", ".#.", ".#.", "###"],
            },
        );
        m.insert(
            "2",
            GlyphDef {
                top: 1,
                rows: &[
                    ".###.", "#...#", "....#", "....#", "...#.", "..#..", ".#...", "#....",
                    "#####",
                ],
            },
        );
        m.insert(
            "3",
            GlyphDef {
                top: 1,
                rows: &[
                    ".###.", "#...#", "....#", "..##.", "....#", "....#", "#...#", "#...#",
                    ".###.",
                ],
            },
        );
        m.insert(
            "4",
            GlyphDef {
                top: 1,
                rows: &[
                    "...#.", "..##.", ".#.#.", "#..#.", "#..#.", "#####", "...#.", "...#.",
                    "...#.",
                ],
            },
        );
        m.insert(
            "5",
            GlyphDef {
                top: 1,
                rows: &[
                    "#####", "#....", "#....", "####.", "....#", "....#", "....#", "#...#",
                    ".###.",
                ],
            },
        );
        m.insert(
            "6",
            GlyphDef {
                top: 1,
                rows: &[
                    ".###.", "#...#", "#....", "####.", "#...#", "#...#", "#...#", "#...#",
                    ".###.",
                ],
            },
        );
        m.insert(
            "7",
            GlyphDef {
                top: 1,
                rows: &[
                    "#####", "....#", "....#", "...#.", "...#.", "..#..", "..#..", ".#...",
                    ".#...",
                ],
            },
        );
        m.insert(
            "8",
            GlyphDef {
                top: 1,
                rows: &[
                    ".###.", "#...#", "#...#", ".###.", "#...#", "#...#", "#...#", "#...#",
                    ".###.",
                ],
            },
        );
        m.insert(
            "9",
            GlyphDef {
                top: 1,
                rows: &[
                    ".###.", "#...#", "#...#", "#...#", ".####", "....#", "....#", "#...#",
                    ".###.",
                ],
            },
        );
        m.insert(
            "a",
            GlyphDef {
                top: 3,
                rows: &[".###.", "....#", ".####", "#...#", "#...#", "#...#", ".####"],
            },
        );
        m.insert(
            "b",
            GlyphDef {
                top: 1,
                rows: &[
                    "#....", "#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#",
                    "####.",
                ],
            },
        );
        m.insert(
            "c",
            GlyphDef {
                top: 3,
                rows: &[".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
            },
        );
        m.insert(
            "x",
            GlyphDef {
                top: 3,
                rows: &["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
            },
        );
        m.insert(
            "y",
            GlyphDef {
                top: 3,
                rows: &["#...#", "#...#", "#...#", ".#.#.", "..#..", "..#..", ".#..."],
            },
        );
        m.insert(
            "z",
            GlyphDef {
                top: 3,
                rows: &["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
            },
        );
        m.insert(
            "+",
            GlyphDef {
                top: 3,
                rows: &["..#..", "..#..", "#####", "..#..", "..#.."],
            },
        );
        m.insert(
            "-",
            GlyphDef {
                top: 5,
                rows: &["#####"],
            },
        );
        m.insert(
            "=",
            GlyphDef {
                top: 4,
                rows: &["#####", ".....", "#####"],
            },
        );
        m.insert(
            "(",
            GlyphDef {
                top: 1,
                rows: &["..#", ".#.", "#..", "#..", "#..", "#..", "#..", ".#.", "..#"],
            },
        );
        m.insert(
            ")",
            GlyphDef {
                top: 1,
                rows: &["#..", ".#.", "..#", "..#", "..#", "..#", "..#", ".#.", "#.."],
            },
        );
        m
    })
}

/// Atom token texts the atlas can draw.
pub fn atlas_tokens() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = glyph_table().keys().copied().collect();
    v.sort();
    v
}

#[derive(Debug, Clone)]
enum LayoutNode {
    Atom(String),
    Seq(Vec<LayoutNode>),
    Script {
        base: Box<LayoutNode>,
        superscript: Option<Box<LayoutNode>>,
        subscript: Option<Box<LayoutNode>>,
    },
    Fraction(Box<LayoutNode>, Box<LayoutNode>),
}

/// Either a fixed atlas glyph or a synthesized fraction bar, positioned in
/// sheet-local coordinates (rows may be negative before final shifting).
#[derive(Debug, Clone)]
enum Placement {
    Glyph { text: String, row: i32, col: i32 },
    Bar { row: i32, col: i32, width: i32 },
}

#[derive(Debug, Clone)]
struct Sheet {
    placements: Vec<Placement>,
    /// Ink extent in local coordinates.
    top: i32,
    bottom: i32,
    width: i32,
}

impl Sheet {
    fn shift(&mut self, d_row: i32, d_col: i32) {
        for p in &mut self.placements {
            match p {
                Placement::Glyph { row, col, .. } | Placement::Bar { row, col, .. } => {
                    *row += d_row;
                    *col += d_col;
                }
            }
        }
        self.top += d_row;
        self.bottom += d_row;
    }
}

fn glyph_extent(text: &str) -> Result<(i32, i32, i32)> {
    let def = glyph_table()
        .get(text)
        .ok_or_else(|| Error::Render(format!("no glyph for token {:?}", text)))?;
    let h = def.rows.len() as i32;
    let w = def.rows[0].len() as i32;
    Ok((def.top, h, w))
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn expect(&mut self, text: &str) -> Result<()> {
        match self.next() {
            Some(t) if t.text == text => Ok(()),
            other => Err(Error::Render(format!(
                "expected {:?}, found {:?}",
                text,
                other.map(|t| t.text.as_str())
            ))),
        }
    }

    /// A sequence of items until end of input or an unmatched `}`.
    fn parse_seq(&mut self) -> Result<LayoutNode> {
        let mut items = Vec::new();
        while let Some(t) = self.peek() {
            if t.text == "}" {
                break;
            }
            items.push(self.parse_item()?);
        }
        Ok(LayoutNode::Seq(items))
    }

    /// One atom/group/fraction, with trailing ^ and _ arguments attached.
    fn parse_item(&mut self) -> Result<LayoutNode> {
        let t = self
            .next()
            .ok_or_else(|| Error::Render("unexpected end of tokens".into()))?;
        let mut base = match (t.kind, t.text.as_str()) {
            (TokenKind::Control, _) => {
                return Err(Error::Render(format!("control token {} in render input", t.text)))
            }
            (_, "{") => {
                let inner = self.parse_seq()?;
                self.expect("}")?;
                inner
            }
            (_, "}") => return Err(Error::Render("unexpected closing brace".into())),
            (_, "^") | (_, "_") => {
                return Err(Error::Render(format!("{} without a base", t.text)))
            }
            (TokenKind::Command, "\\frac") => {
                let num = self.parse_argument()?;
                let den = self.parse_argument()?;
                LayoutNode::Fraction(Box::new(num), Box::new(den))
            }
            (TokenKind::Command, other) => {
                return Err(Error::Render(format!("unsupported command {}", other)))
            }
            (_, text) => LayoutNode::Atom(text.to_string()),
        };
        loop {
            match self.peek().map(|t| t.text.as_str()) {
                Some("^") => {
                    self.next();
                    let arg = self.parse_argument()?;
                    base = attach_script(base, Some(arg), None);
                }
                Some("_") => {
                    self.next();
                    let arg = self.parse_argument()?;
                    base = attach_script(base, None, Some(arg));
                }
                _ => break,
            }
        }
        Ok(base)
    }

    /// A script or fraction argument: either a braced group or one atom.
    fn parse_argument(&mut self) -> Result<LayoutNode> {
        match self.peek() {
            Some(t) if t.text == "{" => {
                self.next();
                let inner = self.parse_seq()?;
                self.expect("}")?;
                Ok(inner)
            }
            Some(t) if t.kind == TokenKind::Symbol && t.text != "^" && t.text != "_" => {
                let text = t.text.clone();
                self.next();
                Ok(LayoutNode::Atom(text))
            }
            other => Err(Error::Render(format!(
                "expected argument, found {:?}",
                other.map(|t| t.text.as_str())
            ))),
        }
    }
}

fn attach_script(
    base: LayoutNode,
    superscript: Option<LayoutNode>,
    subscript: Option<LayoutNode>,
) -> LayoutNode {
    match base {
        LayoutNode::Script {
            base,
            superscript: existing_sup,
            subscript: existing_sub,
        } => LayoutNode::Script {
            base,
            superscript: superscript.map(Box::new).or(existing_sup),
            subscript: subscript.map(Box::new).or(existing_sub),
        },
        other => LayoutNode::Script {
            base: Box::new(other),
            superscript: superscript.map(Box::new),
            subscript: subscript.map(Box::new),
        },
    }
}

fn layout(node: &LayoutNode) -> Result<Sheet> {
    match node {
        LayoutNode::Atom(text) => {
            let (top, h, w) = glyph_extent(text)?;
            Ok(Sheet {
                placements: vec![Placement::Glyph {
                    text: text.clone(),
                    row: top,
                    col: 0,
                }],
                top,
                bottom: top + h,
                width: w,
            })
        }
        LayoutNode::Seq(items) => {
            let mut sheet = Sheet {
                placements: Vec::new(),
                top: i32::MAX,
                bottom: i32::MIN,
                width: 0,
            };
            let mut cursor = 0;
            for item in items {
                let mut sub = layout(item)?;
                if sub.placements.is_empty() {
                    continue;
                }
                sub.shift(0, cursor);
                cursor += sub.width + GLYPH_SPACING;
                sheet.top = sheet.top.min(sub.top);
                sheet.bottom = sheet.bottom.max(sub.bottom);
                sheet.width = cursor - GLYPH_SPACING;
                sheet.placements.extend(sub.placements);
            }
            if sheet.placements.is_empty() {
                sheet.top = 0;
                sheet.bottom = 0;
                sheet.width = 0;
            }
            Ok(sheet)
        }
        LayoutNode::Script {
            base,
            superscript,
            subscript,
        } => {
            let mut sheet = layout(base)?;
            let mut cursor = sheet.width + 1;
            if let Some(sup) = superscript {
                let mut s = layout(sup)?;
                s.shift(-SCRIPT_SHIFT, cursor);
                cursor += s.width + 1;
                sheet.top = sheet.top.min(s.top);
                sheet.bottom = sheet.bottom.max(s.bottom);
                sheet.placements.extend(s.placements);
            }
            if let Some(sub) = subscript {
                let mut s = layout(sub)?;
                s.shift(SCRIPT_SHIFT, cursor);
                cursor += s.width + 1;
                sheet.top = sheet.top.min(s.top);
                sheet.bottom = sheet.bottom.max(s.bottom);
                sheet.placements.extend(s.placements);
            }
            sheet.width = cursor - 1;
            Ok(sheet)
        }
        LayoutNode::Fraction(num, den) => {
            let mut n = layout(num)?;
            let mut d = layout(den)?;
            let n_h = n.bottom - n.top;
            let d_h = d.bottom - d.top;
            let bar_width = n.width.max(d.width) + 4;
            // Rows inside the fraction box: numerator, blank, bar, blank,
            // denominator. The bar is centered on the minus-sign axis.
            let bar_row = AXIS_ROW;
            let num_top = bar_row - 2 - n_h;
            let den_top = bar_row + 3;
            n.shift(num_top - n.top, (bar_width - n.width) / 2);
            d.shift(den_top - d.top, (bar_width - d.width) / 2);
            let mut placements = n.placements;
            placements.push(Placement::Bar {
                row: bar_row,
                col: 0,
                width: bar_width,
            });
            placements.extend(d.placements);
            Ok(Sheet {
                placements,
                top: num_top,
                bottom: den_top + d_h,
                width: bar_width,
            })
        }
    }
}

/// A placed atlas glyph in final image coordinates, with the connected
/// components its bitmap contributes.
#[derive(Debug, Clone)]
pub struct PlacedGlyph {
    pub token: String,
    /// Component bounding boxes in image coordinates. Most glyphs are one
    /// component; `=` contributes two.
    pub component_boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: BinaryMask,
    pub glyphs: Vec<PlacedGlyph>,
}

/// Connected-component boxes of a single glyph bitmap, in glyph-local
/// coordinates.
fn glyph_component_boxes(def: &GlyphDef) -> Vec<BoundingBox> {
    let h = def.rows.len();
    let w = def.rows[0].len();
    let mask = BinaryMask {
        height: h,
        width: w,
        bits: def
            .rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect(),
    };
    let (labels, count) = label_components(&mask, Connectivity::Eight);
    let mut boxes: Vec<Option<BoundingBox>> = vec![None; count];
    for (idx, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let (r, c) = (idx / w, idx % w);
        let k = (label - 1) as usize;
        boxes[k] = Some(match boxes[k] {
            None => BoundingBox {
                top: r,
                bottom: r,
                left: c,
                right: c,
            },
            Some(b) => BoundingBox {
                top: b.top.min(r),
                bottom: b.bottom.max(r),
                left: b.left.min(c),
                right: b.right.max(c),
            },
        });
    }
    boxes.into_iter().flatten().collect()
}

/// Renders a token list to an ink mask plus per-glyph component boxes.
pub fn render_tokens(tokens: &[Token]) -> Result<Rendered> {
    let mut parser = Parser { tokens, pos: 0 };
    let tree = parser.parse_seq()?;
    if parser.pos != tokens.len() {
        return Err(Error::Render(format!(
            "unmatched closing brace at token {}",
            parser.pos
        )));
    }
    let sheet = layout(&tree)?;
    if sheet.placements.is_empty() {
        return Err(Error::Render("nothing to render".into()));
    }

    // Ink extent across placements, then shift into a margin-padded canvas.
    let mut top = i32::MAX;
    let mut bottom = i32::MIN;
    let mut left = i32::MAX;
    let mut right = i32::MIN;
    for p in &sheet.placements {
        match p {
            Placement::Glyph { text, row, col } => {
                let (_, h, w) = glyph_extent(text)?;
                top = top.min(*row);
                bottom = bottom.max(*row + h);
                left = left.min(*col);
                right = right.max(*col + w);
            }
            Placement::Bar { row, col, width } => {
                top = top.min(*row);
                bottom = bottom.max(*row + 1);
                left = left.min(*col);
                right = right.max(*col + width);
            }
        }
    }
    let height = (bottom - top + 2 * MARGIN) as usize;
    let width = (right - left + 2 * MARGIN) as usize;
    let mut bits = vec![false; height * width];
    let mut glyphs = Vec::new();
    let table = glyph_table();
    for p in &sheet.placements {
        match p {
            Placement::Glyph { text, row, col } => {
                let def = &table[text.as_str()];
                let r0 = (row - top + MARGIN) as usize;
                let c0 = (col - left + MARGIN) as usize;
                for (dr, line) in def.rows.iter().enumerate() {
                    for (dc, ch) in line.chars().enumerate() {
                        if ch == '#' {
                            bits[(r0 + dr) * width + c0 + dc] = true;
                        }
                    }
                }
                let component_boxes = glyph_component_boxes(def)
                    .into_iter()
                    .map(|b| BoundingBox {
                        top: b.top + r0,
                        bottom: b.bottom + r0,
                        left: b.left + c0,
                        right: b.right + c0,
                    })
                    .collect();
                glyphs.push(PlacedGlyph {
                    token: text.clone(),
                    component_boxes,
                });
            }
            Placement::Bar { row, col, width: w } => {
                let r0 = (row - top + MARGIN) as usize;
                let c0 = (col - left + MARGIN) as usize;
                for dc in 0..*w as usize {
                    bits[r0 * width + c0 + dc] = true;
                }
                glyphs.push(PlacedGlyph {
                    token: "\\frac".to_string(),
                    component_boxes: vec![BoundingBox {
                        top: r0,
                        bottom: r0,
                        left: c0,
                        right: c0 + *w as usize - 1,
                    }],
                });
            }
        }
    }
    Ok(Rendered {
        image: BinaryMask {
            height,
            width,
            bits,
        },
        glyphs,
    })
}

/// Ink mask to grayscale: ink 0, paper 255.
pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage {
        height: mask.height,
        width: mask.width,
        pixels: mask.bits.iter().map(|&b| if b { 0 } else { 255 }).collect(),
    }
}

/// Produces the rendered ink mask used by the Match metrics.
pub trait Renderer {
    fn render(&self, tokens: &[Token]) -> Result<BinaryMask>;
}

/// The built-in deterministic atlas renderer.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlyphRenderer;

impl Renderer for GlyphRenderer {
    fn render(&self, tokens: &[Token]) -> Result<BinaryMask> {
        Ok(render_tokens(tokens)?.image)
    }
}

/// Adapter around an external command (e.g. a LaTeX toolchain). The command
/// receives the detokenized expression as its last argument followed by an
/// output PNG path; the produced image is binarized at the threshold.
#[derive(Debug, Clone)]
pub struct ExternalCommandRenderer {
    pub program: String,
    pub args: Vec<String>,
    pub threshold: u8,
}

impl Renderer for ExternalCommandRenderer {
    fn render(&self, tokens: &[Token]) -> Result<BinaryMask> {
        let latex = crate::token::detokenize(tokens)?;
        let dir = std::env::temp_dir();
        let out = dir.join(format!("render_{}.png", std::process::id()));
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&latex)
            .arg(&out)
            .status()
            .map_err(|e| Error::Render(format!("renderer command failed to start: {}", e)))?;
        if !status.success() {
            return Err(Error::Render(format!(
                "renderer command exited with {}",
                status
            )));
        }
        let img = GrayImage::load_png(Path::new(&out))?;
        let mask = crate::segmentation::binarize(&img, self.threshold);
        let _ = std::fs::remove_file(&out);
        Ok(mask)
    }
}

//! Small random programs in let-chain form over two regions `r1 < r2`.
//!
//! Choices mostly respect the typing rules; a set high bit makes the pick
//! careless (a consumed flip, a guard in the wrong region), so the stream also
//! yields ill-typed programs for the dynamic checks.
#![allow(dead_code)]

use proptest::prelude::*;

pub mod trees;

#[derive(Clone)]
struct Flip {
    name: String,
    low: bool,
    live: bool,
}

#[derive(Clone)]
struct Bit {
    name: String,
    public: bool,
}

pub struct Gen {
    flips: Vec<Flip>,
    bits: Vec<Bit>,
    body: Vec<String>,
    fresh: usize,
    secret_lits: usize,
}

/// Free variables of open programs and their types.
pub const OPEN_ENV: [(&str, &str); 4] = [("x", "flip^r1"), ("y", "flip^r2"), ("s", "bitS^r1"), ("p", "bitP")];

impl Gen {
    fn new(open: bool) -> Gen {
        let mut g = Gen { flips: Vec::new(), bits: Vec::new(), body: Vec::new(), fresh: 0, secret_lits: 0 };
        if open {
            g.flips.push(Flip { name: "x".into(), low: true, live: true });
            g.flips.push(Flip { name: "y".into(), low: false, live: true });
            g.bits.push(Bit { name: "s".into(), public: false });
            g.bits.push(Bit { name: "p".into(), public: true });
        }
        g
    }

    fn name(&mut self, prefix: &str) -> String {
        self.fresh += 1;
        format!("{prefix}{}", self.fresh)
    }

    fn pick_flip(&self, c: u8, low: Option<bool>) -> Option<usize> {
        let careless = c & 0x80 != 0;
        let ok: Vec<usize> = (0..self.flips.len())
            .filter(|&i| careless || (self.flips[i].live && low.map_or(true, |l| self.flips[i].low == l)))
            .collect();
        if ok.is_empty() {
            None
        } else {
            Some(ok[c as usize % ok.len()])
        }
    }

    fn pick_bit(&self, c: u8, public: bool) -> Option<usize> {
        let ok: Vec<usize> = (0..self.bits.len()).filter(|&i| !public || self.bits[i].public).collect();
        if ok.is_empty() {
            None
        } else {
            Some(ok[c as usize % ok.len()])
        }
    }

    fn op(&mut self, op: u8, c: u8, secrets: &[bool]) {
        match op % 8 {
            0 if self.flips.len() < 5 => {
                let n = self.name("f");
                let low = c % 2 == 0;
                self.body.push(format!("let {n} = flip^{}() in", if low { "r1" } else { "r2" }));
                self.flips.push(Flip { name: n, low, live: true });
            }
            1 => {
                if let Some(i) = self.pick_flip(c, None) {
                    let n = self.name("b");
                    self.body.push(format!("let {n} = castP({}) in", self.flips[i].name));
                    self.flips[i].live = false;
                    self.bits.push(Bit { name: n, public: true });
                }
            }
            2 => {
                if let Some(i) = self.pick_flip(c, None) {
                    let n = self.name("b");
                    self.body.push(format!("let {n} = castS({}) in", self.flips[i].name));
                    self.bits.push(Bit { name: n, public: false });
                }
            }
            3 => {
                let careless = c & 0x80 != 0;
                let g = self.pick_flip(c, Some(true));
                let a = self.pick_flip(c.wrapping_mul(3).wrapping_add(1) | (c & 0x80), Some(careless));
                let b = self.pick_flip(c.wrapping_mul(5).wrapping_add(2) | (c & 0x80), Some(careless));
                if let (Some(g), Some(a), Some(b)) = (g, a, b) {
                    if a == b || g == a || g == b {
                        return;
                    }
                    let (n1, n2) = (self.name("f"), self.name("f"));
                    self.body.push(format!(
                        "let ({n1}, {n2}) = mux(castS({}), {}, {}) in",
                        self.flips[g].name, self.flips[a].name, self.flips[b].name
                    ));
                    let low = self.flips[a].low;
                    self.flips[a].live = false;
                    self.flips[b].live = false;
                    self.flips.push(Flip { name: n1, low, live: true });
                    self.flips.push(Flip { name: n2, low, live: true });
                }
            }
            4 => {
                if let (Some(a), Some(f)) = (self.pick_bit(c, false), self.pick_flip(c / 3 | (c & 0x80), None)) {
                    let n = self.name("f");
                    self.body.push(format!("let {n} = xor({}, {}) in", self.bits[a].name, self.flips[f].name));
                    let low = self.flips[f].low;
                    self.flips[f].live = false;
                    self.flips.push(Flip { name: n, low, live: true });
                }
            }
            5 => {
                if let (Some(g), Some(a), Some(b)) =
                    (self.pick_bit(c, true), self.pick_bit(c / 2, false), self.pick_bit(c / 5, false))
                {
                    let n = self.name("b");
                    let public = self.bits[a].public && self.bits[b].public;
                    self.body.push(format!(
                        "let {n} = if {} then {} else {} in",
                        self.bits[g].name, self.bits[a].name, self.bits[b].name
                    ));
                    self.bits.push(Bit { name: n, public });
                }
            }
            6 => {
                if let (Some(g), Some(a), Some(b)) =
                    (self.pick_bit(c, false), self.pick_bit(c / 2, false), self.pick_bit(c / 7, false))
                {
                    let (n1, n2) = (self.name("b"), self.name("b"));
                    let public = self.bits[g].public && self.bits[a].public && self.bits[b].public;
                    self.body.push(format!(
                        "let ({n1}, {n2}) = mux({}, {}, {}) in",
                        self.bits[g].name, self.bits[a].name, self.bits[b].name
                    ));
                    self.bits.push(Bit { name: n1, public });
                    self.bits.push(Bit { name: n2, public });
                }
            }
            7 => {
                let n = self.name("b");
                if c % 2 == 0 {
                    self.body.push(format!("let {n} = {}P in", c / 2 % 2));
                    self.bits.push(Bit { name: n, public: true });
                } else {
                    let v = secrets.get(self.secret_lits).copied().unwrap_or(false);
                    self.secret_lits += 1;
                    self.body.push(format!("let {n} = {}S in", v as u8));
                    self.bits.push(Bit { name: n, public: false });
                }
            }
            _ => {}
        }
    }

    fn finish(&self) -> String {
        let result = match self.bits.len() {
            0 => "()".to_string(),
            1 => self.bits[0].name.clone(),
            n => format!("({}, {})", self.bits[n - 1].name, self.bits[n - 2].name),
        };
        let mut out = String::from("region r1 < r2;\n");
        for line in &self.body {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&result);
        out
    }
}

/// Program text for a choice stream; `secrets` supplies the values of secret
/// literals in order, so two calls differing only there are low-equivalent.
pub fn program(choices: &[(u8, u8)], secrets: &[bool], open: bool) -> String {
    let mut g = Gen::new(open);
    for &(op, c) in choices {
        g.op(op, c, secrets);
    }
    g.finish()
}

pub fn choices() -> impl Strategy<Value = Vec<(u8, u8)>> {
    proptest::collection::vec((any::<u8>(), any::<u8>()), 1..10)
}

/// Generous step bound: every let-chain step and reduction fits.
pub fn bound(src: &str) -> u32 {
    6 * src.lines().count() as u32 + 10
}

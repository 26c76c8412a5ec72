//! Text checkpoints: a small header, a config echo, then one CSV record per
//! Gaussian with every float written to 17 significant digits so that
//! save/load is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian2D, Scene};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "splat2d-checkpoint";
pub const RECORD_HEADER: &str = "mu_x,mu_y,log_scale_x,log_scale_y,rotation,logit_opacity,color_r,color_g,color_b,depth";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub scene: Scene,
    pub config: Vec<(String, String)>,
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn record(g: &Gaussian2D) -> String {
    [
        g.mu[0],
        g.mu[1],
        g.log_scale[0],
        g.log_scale[1],
        g.rotation,
        g.logit_opacity,
        g.color[0],
        g.color[1],
        g.color[2],
        g.depth,
    ]
    .iter()
    .map(|&v| f(v))
    .collect::<Vec<_>>()
    .join(",")
}

/// Bytes one Gaussian occupies in the checkpoint body, newline included.
pub fn record_bytes(g: &Gaussian2D) -> usize {
    record(g).len() + 1
}

/// On-disk size of the Gaussian records of a scene.
pub fn scene_record_bytes(scene: &Scene) -> usize {
    scene.gaussians.iter().map(record_bytes).sum()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse("checkpoint", format!("bad number {s:?}")))
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let b = self.scene.background;
        let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(out, "iteration {}", self.iteration);
        let _ = writeln!(out, "count {}", self.scene.len());
        let _ = writeln!(out, "background {} {} {}", f(b[0]), f(b[1]), f(b[2]));
        for (k, v) in &self.config {
            let _ = writeln!(out, "config {k} = {v}");
        }
        let _ = writeln!(out, "{RECORD_HEADER}");
        for g in &self.scene.gaussians {
            out.push_str(&record(g));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse("checkpoint", format!("missing {what}")))
        };
        let magic = next("magic line")?;
        match magic.split_once(' ') {
            Some((MAGIC, v)) if v.trim() == FORMAT_VERSION.to_string() => {}
            _ => return Err(Error::parse("checkpoint", format!("unsupported header {magic:?}"))),
        }
        let field = |line: &str, name: &str| -> Result<String> {
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::parse("checkpoint", format!("expected `{name}`, got {line:?}")))
        };
        let iteration = field(next("iteration")?, "iteration")?
            .trim()
            .parse()
            .map_err(|_| Error::parse("checkpoint", "bad iteration"))?;
        let count: usize = field(next("count")?, "count")?
            .trim()
            .parse()
            .map_err(|_| Error::parse("checkpoint", "bad count"))?;
        let bg: Vec<f64> = field(next("background")?, "background")?
            .split_whitespace()
            .map(parse_f64)
            .collect::<Result<_>>()?;
        if bg.len() != 3 {
            return Err(Error::parse("checkpoint", "background needs three channels"));
        }
        let mut config = Vec::new();
        let mut line = next("record header")?;
        while let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest
                .split_once(" = ")
                .ok_or_else(|| Error::parse("checkpoint", format!("bad config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
            line = next("record header")?;
        }
        if line != RECORD_HEADER {
            return Err(Error::parse("checkpoint", format!("unexpected record header {line:?}")));
        }
        let mut gaussians = Vec::with_capacity(count);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let v: Vec<f64> = line.split(',').map(parse_f64).collect::<Result<_>>()?;
            if v.len() != 10 {
                return Err(Error::parse("checkpoint", format!("record has {} fields, expected 10", v.len())));
            }
            gaussians.push(Gaussian2D {
                mu: [v[0], v[1]],
                log_scale: [v[2], v[3]],
                rotation: v[4],
                logit_opacity: v[5],
                color: [v[6], v[7], v[8]],
                depth: v[9],
            });
        }
        if gaussians.len() != count {
            return Err(Error::parse("checkpoint", format!("header says {count} gaussians, found {}", gaussians.len())));
        }
        Ok(Checkpoint { iteration, scene: Scene::new(gaussians, [bg[0], bg[1], bg[2]]), config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io("writing checkpoint", path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("reading checkpoint", path, e))?;
        Checkpoint::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn any_gaussian() -> impl Strategy<Value = Gaussian2D> {
        (
            proptest::array::uniform2(-1e3..1e3f64),
            proptest::array::uniform2(-5.0..5.0f64),
            -10.0..10.0f64,
            -20.0..20.0f64,
            proptest::array::uniform3(0.0..=1.0f64),
            0.0..1.0f64,
        )
            .prop_map(|(mu, log_scale, rotation, logit_opacity, color, depth)| Gaussian2D {
                mu,
                log_scale,
                rotation,
                logit_opacity,
                color,
                depth,
            })
    }

    proptest! {
        #[test]
        fn text_roundtrip_is_bit_exact(gs in proptest::collection::vec(any_gaussian(), 1..20), it in 0u64..100_000) {
            let ck = Checkpoint {
                iteration: it,
                scene: Scene::new(gs, [0.1, 0.2, 1.0 / 3.0]),
                config: vec![("policy".into(), "gdags".into()), ("target".into(), String::new())],
            };
            let back = Checkpoint::from_text(&ck.to_text()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint {
            iteration: 3,
            scene: Scene::new(vec![Gaussian2D::isotropic([1.0, 2.0], 1.5, 0.4, [0.5; 3], 0.3)], [0.0; 3]),
            config: vec![],
        };
        let text = ck.to_text();
        assert!(Checkpoint::from_text(&text.replace("count 1", "count 2")).is_err());
        assert!(Checkpoint::from_text(&text.replace("splat2d-checkpoint 1", "splat2d-checkpoint 9")).is_err());
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
    }

    #[test]
    fn record_size_counts_bytes() {
        let scene = Scene::new(vec![Gaussian2D::isotropic([1.0, 2.0], 1.5, 0.4, [0.5; 3], 0.3); 3], [0.0; 3]);
        let ck = Checkpoint { iteration: 0, scene: scene.clone(), config: vec![] };
        let body = ck.to_text();
        let records = body.split_once(&format!("{RECORD_HEADER}\n")).unwrap().1;
        assert_eq!(scene_record_bytes(&scene), records.len());
    }
}

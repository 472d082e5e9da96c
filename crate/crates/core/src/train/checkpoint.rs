//! Training checkpoints: a readable `key = value` header describing the run,
//! then a `CURIO1` tensor block with network weights and optimizer moments.
//!
//! ```text
//! CURIO-CHECKPOINT
//! [world] ...
//! [network] ...
//! [train] ...
//! [state] epoch, step, adam steps, val_history
//! END
//! CURIO1<tensors>
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::checkpoint::{decode, encode};
use crate::autodiff::{AdamState, Tensor};
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::nn::{Generator, NetworkConfig};
use crate::worlds::WorldSpec;

use super::{TrainConfig, Trainer};

const HEADER: &str = "CURIO-CHECKPOINT\n";
const END: &str = "END\n";

fn adam_tensors(prefix: &str, s: &AdamState, out: &mut Vec<(String, Tensor)>) {
    for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
        out.push((format!("{prefix}/m/{i}"), m.clone()));
        out.push((format!("{prefix}/v/{i}"), v.clone()));
    }
}

fn restore_adam(prefix: &str, s: &mut AdamState, tensors: &[(String, Tensor)], what: &str) -> Result<()> {
    let find = |name: String| {
        tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::format(what, 0, format!("missing tensor {name}")))
    };
    for i in 0..s.m.len() {
        let (m, v) = (find(format!("{prefix}/m/{i}"))?, find(format!("{prefix}/v/{i}"))?);
        if m.shape() != s.m[i].shape() || v.shape() != s.v[i].shape() {
            return Err(Error::ShapeMismatch(format!("{prefix} moment {i} has the wrong shape")));
        }
        s.m[i] = m;
        s.v[i] = v;
    }
    Ok(())
}

fn prefixed(prefix: &str, named: Vec<(String, Tensor)>) -> impl Iterator<Item = (String, Tensor)> + '_ {
    named.into_iter().map(move |(n, t)| (format!("{prefix}/{n}"), t))
}

fn strip(prefix: &str, tensors: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    let p = format!("{prefix}/");
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Serialize the full trainer state.
pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut kv = KvFile::new();
    t.world.to_kv(&mut kv, "world");
    t.net.to_kv(&mut kv, "network");
    t.cfg.to_kv(&mut kv, "train");
    kv.set("state", "epoch", t.epoch);
    kv.set("state", "step", t.step);
    kv.set("state", "gen_adam_step", t.gen_opt.step);
    if let Some(o) = &t.critic_opt {
        kv.set("state", "critic_adam_step", o.step);
    }
    let hist: Vec<String> = t.val_history.iter().map(|v| format!("{v:?}")).collect();
    kv.set("state", "val_history", hist.join(","));

    let mut tensors: Vec<(String, Tensor)> = prefixed("gen", t.generator.store.named()).collect();
    adam_tensors("gen_adam", &t.gen_opt, &mut tensors);
    if let (Some(c), Some(o)) = (&t.critic, &t.critic_opt) {
        tensors.extend(prefixed("critic", c.store.named()));
        adam_tensors("critic_adam", o, &mut tensors);
    }
    let mut out = Vec::new();
    out.extend_from_slice(HEADER.as_bytes());
    out.extend_from_slice(kv.to_text().as_bytes());
    out.extend_from_slice(END.as_bytes());
    out.extend(encode(&tensors));
    out
}

fn split_header<'a>(buf: &'a [u8], what: &str) -> Result<(KvFile, &'a [u8])> {
    let rest = buf
        .strip_prefix(HEADER.as_bytes())
        .ok_or_else(|| Error::format(what, 0, "not a checkpoint (missing CURIO-CHECKPOINT header)"))?;
    let marker = format!("\n{END}");
    let pos = rest
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .ok_or_else(|| Error::format(what, 0, "checkpoint header has no END line"))?;
    let text = std::str::from_utf8(&rest[..pos + 1]).map_err(|_| Error::format(what, 0, "header is not UTF-8"))?;
    Ok((KvFile::parse(text, what)?, &rest[pos + marker.len()..]))
}

/// Rebuild a trainer exactly as it was saved.
pub fn from_bytes(buf: &[u8], what: &str) -> Result<Trainer> {
    let (kv, body) = split_header(buf, what)?;
    let world = WorldSpec::from_kv(&kv, "world")?;
    let net = NetworkConfig::from_kv(&kv, "network")?;
    let cfg = TrainConfig::from_kv(&kv, "train")?;
    let mut t = Trainer::new(&world, &net, &cfg)?;
    t.epoch = kv.require("state", "epoch")?;
    t.step = kv.require("state", "step")?;
    t.gen_opt.step = kv.require("state", "gen_adam_step")?;
    let hist = kv.get("state", "val_history").unwrap_or("");
    t.val_history = hist
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("[state] val_history: cannot parse '{hist}'")))?;

    let tensors = decode(body)?;
    t.generator.store.load_from(&strip("gen", &tensors))?;
    restore_adam("gen_adam", &mut t.gen_opt, &tensors, what)?;
    if let (Some(c), Some(o)) = (t.critic.as_mut(), t.critic_opt.as_mut()) {
        c.store.load_from(&strip("critic", &tensors))?;
        o.step = kv.require("state", "critic_adam_step")?;
        restore_adam("critic_adam", o, &tensors, what)?;
    }
    Ok(t)
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, &path.display().to_string())
}

/// Generator and world of a checkpoint, without optimizer or critic state.
pub fn load_generator(path: &Path) -> Result<(Generator, WorldSpec)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let (kv, body) = split_header(&buf, &what)?;
    let world = WorldSpec::from_kv(&kv, "world")?;
    let net = NetworkConfig::from_kv(&kv, "network")?;
    let mut g = Generator::new(&net, 0)?;
    g.store.load_from(&strip("gen", &decode(body)?))?;
    Ok((g, world))
}

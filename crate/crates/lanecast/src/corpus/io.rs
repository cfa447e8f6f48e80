//! Bit-exact episode files and the corpus manifest.
//!
//! Episode file layout (all integers and floats little-endian):
//!
//! ```text
//! "RSEP" | version: u16 | frame_bytes: u32 | frames: f32[T*2*32*64]
//! | controls: f32[T*2] | poses: f32[T*3] | command: u8 | source: u8
//! | infraction: f32 | seed: u64 | crc32: u32
//! ```
//!
//! The checksum covers every byte after the version field. The manifest is a
//! JSON file listing episode filenames, source tags, commands, infraction
//! scores, and the master seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::toyworld::{Frame, FRAME_LEN};

use super::{Command, CorpusError, Episode, EpisodeControl, EpisodePose, Source};

const MAGIC: &[u8; 4] = b"RSEP";
const VERSION: u16 = 1;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub source: Source,
    pub command: Command,
    pub infraction: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub episodes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        let body = serde_json::to_vec_pretty(self)?;
        let tmp = dir.join(format!("{MANIFEST_NAME}.tmp"));
        let result = (|| {
            fs::write(&tmp, body)?;
            fs::rename(&tmp, dir.join(MANIFEST_NAME))?;
            Ok(())
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    pub fn load(dir: &Path) -> Result<Manifest, CorpusError> {
        let body = fs::read(dir.join(MANIFEST_NAME))?;
        Ok(serde_json::from_slice(&body)?)
    }
}

fn push_f32s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(episode: &Episode) -> Vec<u8> {
    let t = episode.len();
    let frame_bytes = (t * FRAME_LEN * 4) as u32;
    let mut payload = Vec::with_capacity(frame_bytes as usize + t * 20 + 32);
    payload.extend_from_slice(&frame_bytes.to_le_bytes());
    for f in &episode.frames {
        push_f32s(&mut payload, f.values());
    }
    for c in &episode.controls {
        push_f32s(&mut payload, [&c.steer, &c.accel]);
    }
    for p in &episode.poses {
        push_f32s(&mut payload, [&p.x, &p.y, &p.yaw]);
    }
    payload.push(episode.command.code());
    payload.push(episode.source.code());
    payload.extend_from_slice(&episode.infraction.to_le_bytes());
    payload.extend_from_slice(&episode.seed.to_le_bytes());

    let mut out = Vec::with_capacity(payload.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn write_episode(path: &Path, episode: &Episode) -> Result<(), CorpusError> {
    episode.validate()?;
    let bytes = encode(episode);
    let tmp = path.with_extension("rsep.tmp");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        if self.at + n > self.buf.len() {
            return Err(CorpusError::Truncated);
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CorpusError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CorpusError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CorpusError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CorpusError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_episode(path: &Path) -> Result<Episode, CorpusError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 10 {
        return Err(CorpusError::Truncated);
    }
    if &bytes[0..4] != MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(CorpusError::BadVersion(version));
    }
    let frame_bytes = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if frame_bytes % (FRAME_LEN * 4) != 0 {
        return Err(CorpusError::InvalidEpisode(format!(
            "frame block of {frame_bytes} bytes is not a whole number of frames"
        )));
    }
    let t = frame_bytes / (FRAME_LEN * 4);
    // the length prefix fixes the full file size, so truncation is
    // detectable before the checksum
    let payload_len = 4 + frame_bytes + t * 8 + t * 12 + 2 + 4 + 8;
    let expected = 6 + payload_len + 4;
    if bytes.len() < expected {
        return Err(CorpusError::Truncated);
    }
    if bytes.len() > expected {
        return Err(CorpusError::InvalidEpisode(format!(
            "{} trailing bytes after the declared fields",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[6..6 + payload_len];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(CorpusError::Checksum);
    }

    let mut cur = Cursor {
        buf: payload,
        at: 0,
    };
    cur.u32()?; // length prefix, validated above
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        frames.push(Frame::from_values(cur.f32s(FRAME_LEN)?));
    }
    let mut controls = Vec::with_capacity(t);
    for _ in 0..t {
        let v = cur.f32s(2)?;
        controls.push(EpisodeControl {
            steer: v[0],
            accel: v[1],
        });
    }
    let mut poses = Vec::with_capacity(t);
    for _ in 0..t {
        let v = cur.f32s(3)?;
        poses.push(EpisodePose {
            x: v[0],
            y: v[1],
            yaw: v[2],
        });
    }
    let command = Command::from_code(cur.u8()?)
        .ok_or_else(|| CorpusError::InvalidEpisode("unknown command code".into()))?;
    let source = Source::from_code(cur.u8()?)
        .ok_or_else(|| CorpusError::InvalidEpisode("unknown source code".into()))?;
    let infraction = cur.f32()?;
    let seed = cur.u64()?;
    debug_assert_eq!(cur.at, payload.len());
    let episode = Episode {
        frames,
        controls,
        poses,
        command,
        source,
        infraction,
        seed,
    };
    episode.validate()?;
    Ok(episode)
}

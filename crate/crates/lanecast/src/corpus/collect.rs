//! Episode collection: runs the simulator under each agent source and writes
//! a corpus directory of episode files plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::toyworld::{
    expert_policy, infraction_score, render, step, ExplorePolicy, InfractionLedger, Track,
    WorldState, DT,
};

use super::{
    label_command, CorpusError, Episode, EpisodeControl, EpisodePose, Manifest, ManifestEntry,
    Source, EPISODE_LEN,
};

/// SplitMix64 step; used to derive independent per-episode seeds from the
/// master seed and an episode index.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn episode_seed(master_seed: u64, index: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(index as u64))
}

/// Runs one full episode. Per-episode draw order: track seed, spawn, then
/// (NonExpert only) the exploration script.
pub fn run_episode(source: Source, seed: u64) -> Result<Episode, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let track = Track::generate(rng.random());
    let mut state = WorldState::spawn(&track, &mut rng);
    let explore = match source {
        Source::NonExpert => Some(ExplorePolicy::sample(&mut rng)),
        _ => None,
    };

    let mut frames = Vec::with_capacity(EPISODE_LEN);
    let mut poses = Vec::with_capacity(EPISODE_LEN);
    let mut controls = Vec::with_capacity(EPISODE_LEN);
    let mut ledger = InfractionLedger::new();
    for tick in 0..EPISODE_LEN {
        frames.push(render(&state, &track));
        let pose = state.ego.pose();
        poses.push(EpisodePose {
            x: pose.x as f32,
            y: pose.y as f32,
            yaw: pose.yaw as f32,
        });
        let ctrl = match &explore {
            Some(policy) => policy.control_at(tick as u32),
            None => expert_policy(&state, &track),
        };
        controls.push(EpisodeControl {
            steer: ctrl.steer() as f32,
            accel: ctrl.accel() as f32,
        });
        state = step(&state, ctrl, DT, &track);
        ledger.update(&state, &track);
    }
    let infraction = infraction_score(&ledger)? as f32;
    let command = label_command(&poses);
    Ok(Episode {
        frames,
        controls,
        poses,
        command,
        source,
        infraction,
        seed,
    })
}

fn episode_file_name(index: usize) -> String {
    format!("ep{index:05}.rsep")
}

/// Collects `n_expert` + `n_nonexpert` + `n_unlabeled` episodes into `dir`
/// (created if missing) and writes the manifest last. Episodes are recorded
/// in parallel but indexed and listed in a fixed order: Expert block, then
/// NonExpert, then Unlabeled. Each episode's RNG stream depends only on the
/// master seed and its index, so results are bit-identical across runs and
/// thread schedules. On any failure every file this call wrote is removed.
pub fn collect(
    n_expert: usize,
    n_nonexpert: usize,
    n_unlabeled: usize,
    seed: u64,
    dir: &Path,
) -> Result<Manifest, CorpusError> {
    fs::create_dir_all(dir)?;
    let mut jobs: Vec<(usize, Source)> = Vec::new();
    for _ in 0..n_expert {
        jobs.push((jobs.len(), Source::Expert));
    }
    for _ in 0..n_nonexpert {
        jobs.push((jobs.len(), Source::NonExpert));
    }
    for _ in 0..n_unlabeled {
        jobs.push((jobs.len(), Source::Unlabeled));
    }

    let results: Vec<Result<(PathBuf, ManifestEntry), CorpusError>> = jobs
        .par_iter()
        .map(|&(index, source)| {
            let episode = run_episode(source, episode_seed(seed, index))?;
            let path = dir.join(episode_file_name(index));
            super::write_episode(&path, &episode)?;
            Ok((
                path,
                ManifestEntry {
                    file: episode_file_name(index),
                    source,
                    command: episode.command,
                    infraction: episode.infraction,
                },
            ))
        })
        .collect();

    let mut written = Vec::new();
    let mut entries = Vec::new();
    let mut failure = None;
    for r in results {
        match r {
            Ok((path, entry)) => {
                written.push(path);
                entries.push(entry);
            }
            Err(e) => failure = Some(e),
        }
    }
    if let Some(e) = failure {
        for path in written {
            let _ = fs::remove_file(path);
        }
        return Err(e);
    }

    let manifest = Manifest {
        master_seed: seed,
        episodes: entries,
    };
    if let Err(e) = manifest.save(dir) {
        for path in written {
            let _ = fs::remove_file(path);
        }
        return Err(e);
    }
    Ok(manifest)
}

//! World text export/import and episode traces.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Action, AgentState, Door, Furniture, Room, World, WorldConfig, WorldError};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldText {
    seed: u64,
    config: WorldConfig,
    rooms: Vec<Room>,
    doors: Vec<Door>,
    furniture: Vec<Furniture>,
}

/// Pretty JSON with rooms, doors and furniture; walls are re-derived on import.
pub fn world_to_text(world: &World) -> String {
    let t = WorldText {
        seed: world.seed,
        config: world.config.clone(),
        rooms: world.rooms.clone(),
        doors: world.doors.clone(),
        furniture: world.furniture.clone(),
    };
    serde_json::to_string_pretty(&t).expect("world serializes")
}

pub fn world_from_text(text: &str) -> Result<World, WorldError> {
    let t: WorldText = serde_json::from_str(text).map_err(|e| WorldError::Format(e.to_string()))?;
    let n = t.rooms.len();
    if n == 0 {
        return Err(WorldError::Format("no rooms".into()));
    }
    if t.doors.iter().any(|d| d.rooms.iter().any(|r| *r >= n) || d.axis > 1) {
        return Err(WorldError::Format("door refers to a missing room".into()));
    }
    if t.furniture.iter().any(|f| f.room >= n) {
        return Err(WorldError::Format("furniture refers to a missing room".into()));
    }
    Ok(World::from_parts(t.seed, t.config, t.rooms, t.doors, t.furniture))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: Action,
    /// `[x, y, heading]` after the action.
    pub pose: [f64; 3],
    pub collided: bool,
}

impl TraceRecord {
    pub fn new(step: usize, action: Action, state: &AgentState, collided: bool) -> Self {
        Self {
            step,
            action,
            pose: [state.position[0], state.position[1], state.heading],
            collided,
        }
    }
}

/// One JSON object per line.
pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> io::Result<Vec<TraceRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| l.and_then(|l| serde_json::from_str(&l).map_err(io::Error::from)))
        .collect()
}

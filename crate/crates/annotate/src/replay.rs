use std::collections::BTreeSet;

use deco_core::mesh::{BrushCache, Stroke, StrokeMode};

use crate::error::ApiError;

/// Server-side replay: a set fold over the strokes in submission order.
pub fn replay(cache: &BrushCache, strokes: &[Stroke]) -> Result<BTreeSet<usize>, ApiError> {
    let mut set = BTreeSet::new();
    for (i, s) in strokes.iter().enumerate() {
        let Some(table) = cache.table(s.radius) else {
            return Err(ApiError::BadRequest(format!(
                "stroke {i}: radius {} is not published",
                s.radius
            )));
        };
        let Some(footprint) = table.get(s.center) else {
            return Err(ApiError::BadRequest(format!(
                "stroke {i}: vertex {} out of range",
                s.center
            )));
        };
        match s.mode {
            StrokeMode::Draw => set.extend(footprint.iter().copied()),
            StrokeMode::Erase => footprint.iter().for_each(|v| {
                set.remove(v);
            }),
        }
    }
    Ok(set)
}

/// Vertices only the server has, and only the client has.
pub fn diff(server: &BTreeSet<usize>, client: &BTreeSet<usize>) -> (Vec<usize>, Vec<usize>) {
    (
        server.difference(client).copied().collect(),
        client.difference(server).copied().collect(),
    )
}

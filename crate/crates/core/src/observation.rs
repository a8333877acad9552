//! Conversion of an agent pose plus environment annotations into the
//! ordered natural-language observation block: per-direction summaries,
//! nearby objects, and navigable candidates, arranged clockwise with the
//! agent's current orientation as the front.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::agent::AgentState;
use crate::backend::{BackendError, CompletionBackend, CompletionRequest};
use crate::env::{heading_key, Environment, ObjectAnnotation, Viewpoint};
use crate::geometry::{
    bearing_between, euclidean_distance, normalize_deg, relative_angle, sector_index, sector_label,
};
use crate::prompt::{build_direction_summary_prompt, DIRECTION_SUMMARY_TEMPLATE};

/// Objects farther than this are dropped from observations.
pub const DEFAULT_OBJECT_RADIUS_M: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("unknown viewpoint `{0}`")]
    UnknownViewpoint(String),
    #[error("viewpoint `{viewpoint}` has no summary for heading {heading_deg} and no summarizer is attached")]
    MissingSummaries { viewpoint: String, heading_deg: f64 },
    #[error("summarizer returned a blank summary")]
    EmptySummary,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One-sentence description of everything seen toward a grid heading.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSummary {
    pub heading_deg: f64,
    pub summary: String,
}

/// A navigable neighbor as seen from the current pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateView {
    pub viewpoint_id: String,
    /// Clockwise angle from the (snapped) front, in [0, 360).
    pub relative_deg: f64,
    pub sector: usize,
    pub distance_m: f64,
}

/// An object line ready for rendering; depth is `None` when suppressed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLine {
    pub class_name: String,
    pub depth_m: Option<f64>,
}

/// One egocentric sector, clockwise from front.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SectorBlock {
    pub label: String,
    pub summary: Option<String>,
    pub objects: Vec<ObjectLine>,
    pub candidates: Vec<CandidateView>,
}

/// The structured observation for one pose. Rendered deterministically by
/// [`render_observation`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationText {
    /// The agent heading snapped to the nearest grid heading; sector 0
    /// points this way.
    pub front_heading_deg: f64,
    pub sectors: Vec<SectorBlock>,
    /// Every navigable candidate id, sorted, independent of heading.
    pub candidate_ids: Vec<String>,
}

/// Composition switches: the object filter radius and the ablation flags
/// that drop object lines or their depths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationOptions {
    pub object_radius_m: f64,
    pub include_objects: bool,
    pub include_depth: bool,
}

impl Default for ObservationOptions {
    fn default() -> Self {
        Self {
            object_radius_m: DEFAULT_OBJECT_RADIUS_M,
            include_objects: true,
            include_depth: true,
        }
    }
}

/// Keep the objects within `radius_m` (inclusive), preserving input order.
pub fn filter_objects(objects: &[ObjectAnnotation], radius_m: f64) -> Vec<ObjectAnnotation> {
    objects
        .iter()
        .filter(|o| o.depth_m <= radius_m)
        .cloned()
        .collect()
}

type SummaryCacheKey = (String, i64);

/// Builds observations for poses in one environment. Direction summaries
/// are taken from the environment when precomputed; otherwise the attached
/// summarizer backend is called once per (viewpoint, heading), guarded by a
/// single-flight cache so concurrent composers do not duplicate calls.
pub struct ObservationComposer<'a> {
    env: &'a Environment,
    options: ObservationOptions,
    summarizer: Option<&'a dyn CompletionBackend>,
    cache: Mutex<HashMap<SummaryCacheKey, Arc<Mutex<Option<String>>>>>,
}

impl<'a> ObservationComposer<'a> {
    pub fn new(env: &'a Environment) -> Self {
        Self {
            env,
            options: ObservationOptions::default(),
            summarizer: None,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_options(mut self, options: ObservationOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_summarizer(mut self, summarizer: &'a dyn CompletionBackend) -> Self {
        self.summarizer = Some(summarizer);
        self
    }

    pub fn environment(&self) -> &Environment {
        self.env
    }

    /// The one-sentence summary for a grid heading of a viewpoint.
    /// Precomputed summaries bypass the backend entirely; otherwise the
    /// captions of the heading's views are summarized once and cached.
    pub fn summarize_direction(
        &self,
        viewpoint_id: &str,
        heading_deg: f64,
    ) -> Result<DirectionSummary, ObservationError> {
        let vp = self
            .env
            .viewpoint(viewpoint_id)
            .ok_or_else(|| ObservationError::UnknownViewpoint(viewpoint_id.to_string()))?;
        if let Some(stored) = vp.direction_summary(heading_deg) {
            return Ok(DirectionSummary {
                heading_deg,
                summary: stored.to_string(),
            });
        }
        let Some(summarizer) = self.summarizer else {
            return Err(ObservationError::MissingSummaries {
                viewpoint: viewpoint_id.to_string(),
                heading_deg,
            });
        };

        let key: SummaryCacheKey = (viewpoint_id.to_string(), heading_key(heading_deg));
        let slot = {
            let mut cache = self.cache.lock().unwrap();
            Arc::clone(cache.entry(key).or_default())
        };
        // Holding the per-key lock across the backend call makes concurrent
        // requests for the same direction wait for the first result.
        let mut slot = slot.lock().unwrap();
        if let Some(summary) = slot.as_ref() {
            return Ok(DirectionSummary {
                heading_deg,
                summary: summary.clone(),
            });
        }

        let prompt = direction_prompt(vp, heading_deg)?;
        let response = summarizer.complete(&CompletionRequest::new(prompt))?;
        let summary = response.trim().to_string();
        if summary.is_empty() {
            return Err(ObservationError::EmptySummary);
        }
        *slot = Some(summary.clone());
        Ok(DirectionSummary {
            heading_deg,
            summary,
        })
    }

    /// Assemble the full observation for a pose: the agent heading snaps to
    /// the nearest grid heading to anchor the front sector, and every
    /// direction summary, filtered object, and candidate is assigned to its
    /// sector clockwise from there.
    pub fn compose(&self, state: &AgentState) -> Result<ObservationText, ObservationError> {
        let vp = self
            .env
            .viewpoint(&state.viewpoint_id)
            .ok_or_else(|| ObservationError::UnknownViewpoint(state.viewpoint_id.clone()))?;

        let sectors_n = self.env.granularity.headings;
        let step = self.env.granularity.heading_step();
        let front = normalize_deg((state.heading_deg / step).round() * step);

        let mut sectors: Vec<SectorBlock> = (0..sectors_n)
            .map(|i| SectorBlock {
                label: sector_label(i, sectors_n),
                ..SectorBlock::default()
            })
            .collect();

        for (i, sector) in sectors.iter_mut().enumerate() {
            let grid_heading = normalize_deg(front + i as f64 * step);
            let summary = self.summarize_direction(&vp.id, grid_heading)?;
            sector.summary = Some(summary.summary);
        }

        if self.options.include_objects {
            for object in filter_objects(&vp.objects, self.options.object_radius_m) {
                let rel = relative_angle(front, object.heading_deg);
                let sector = sector_index(rel, sectors_n);
                sectors[sector].objects.push(ObjectLine {
                    class_name: object.class_name,
                    depth_m: self.options.include_depth.then_some(object.depth_m),
                });
            }
        }

        for neighbor_id in &vp.neighbors {
            let neighbor = self
                .env
                .viewpoint(neighbor_id)
                .ok_or_else(|| ObservationError::UnknownViewpoint(neighbor_id.clone()))?;
            // Vertically stacked viewpoints have no defined bearing; treat
            // them as straight ahead rather than dropping a legal move.
            let bearing =
                bearing_between(&vp.position, &neighbor.position).unwrap_or(front);
            let rel = relative_angle(front, bearing);
            let sector = sector_index(rel, sectors_n);
            sectors[sector].candidates.push(CandidateView {
                viewpoint_id: neighbor_id.clone(),
                relative_deg: rel,
                sector,
                distance_m: euclidean_distance(&vp.position, &neighbor.position),
            });
        }
        for (i, sector) in sectors.iter_mut().enumerate() {
            let center = i as f64 * step;
            // Order by the signed offset from the sector center so the
            // listing is invariant under whole-sector rotations of the
            // agent heading.
            sector.candidates.sort_by(|a, b| {
                let offset =
                    |c: &CandidateView| normalize_deg(c.relative_deg - center + 180.0) - 180.0;
                offset(a)
                    .total_cmp(&offset(b))
                    .then_with(|| a.viewpoint_id.cmp(&b.viewpoint_id))
            });
        }

        let mut candidate_ids: Vec<String> = vp.neighbors.clone();
        candidate_ids.sort();

        Ok(ObservationText {
            front_heading_deg: front,
            sectors,
            candidate_ids,
        })
    }
}

/// Build the summarizer prompt for one heading. With a single configured
/// elevation there is nothing to merge and the lone caption is used as the
/// summary source directly; with three, the captions are ordered to match
/// the template's top/down/middle wording.
fn direction_prompt(vp: &Viewpoint, heading_deg: f64) -> Result<String, ObservationError> {
    let key = heading_key(heading_deg);
    let mut views: Vec<_> = vp
        .views
        .iter()
        .filter(|v| heading_key(v.heading_deg) == key)
        .collect();
    if views.is_empty() {
        return Err(ObservationError::MissingSummaries {
            viewpoint: vp.id.clone(),
            heading_deg,
        });
    }
    views.sort_by(|a, b| b.elevation_deg.total_cmp(&a.elevation_deg));
    let mut ordered: Vec<String> = Vec::with_capacity(views.len());
    ordered.push(views[0].caption.clone());
    if views.len() > 1 {
        ordered.push(views[views.len() - 1].caption.clone());
        for view in &views[1..views.len() - 1] {
            ordered.push(view.caption.clone());
        }
    }
    if ordered.len() == 3 {
        return Ok(build_direction_summary_prompt(&ordered)
            .expect("exactly three captions"));
    }
    let description = ordered.join("\n");
    Ok(DIRECTION_SUMMARY_TEMPLATE
        .fill(&[("description", &description)])
        .expect("the description placeholder is always bound"))
}

/// Deterministic text layout: one titled paragraph per sector, clockwise
/// from front, then the flat candidate list. Byte-identical for identical
/// inputs.
pub fn render_observation(observation: &ObservationText) -> String {
    let mut out = String::new();
    for sector in &observation.sectors {
        out.push_str(&sector.label);
        out.push_str(":\n");
        let mut any = false;
        if let Some(summary) = &sector.summary {
            out.push_str(summary);
            out.push('\n');
            any = true;
        }
        for object in &sector.objects {
            match object.depth_m {
                Some(depth) => {
                    out.push_str(&format!("{}, {depth:.2} meters away\n", object.class_name))
                }
                None => out.push_str(&format!("{}\n", object.class_name)),
            }
            any = true;
        }
        for candidate in &sector.candidates {
            out.push_str(&format!(
                "navigable viewpoint {}, range {:.2} m\n",
                candidate.viewpoint_id, candidate.distance_m
            ));
            any = true;
        }
        if !any {
            out.push_str("nothing notable\n");
        }
    }
    out.push_str(&format!(
        "Navigable viewpoints: [{}]",
        observation.candidate_ids.join(", ")
    ));
    out
}

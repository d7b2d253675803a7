//! Simulated apps under test.
//!
//! An [`AppModel`] is a declarative screen graph. Each screen lists its
//! widgets, and each declared transition maps a `(screen, action)` pair to
//! one or more probabilistic outcomes. Every outcome names the functions it
//! covers, which stands in for the per-function coverage events an
//! instrumented build would emit.

mod generate;
mod oracle;
mod sim;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use generate::{generate_synthetic_app, GeneratorSpec};
pub use oracle::{TriggerDistance, TriggerWitness};
pub use sim::{actions_for_widgets, StepResult};

pub type FunctionId = u32;

/// Default screen dimensions in pixels.
pub const DEFAULT_SCREEN_WIDTH: i32 = 1080;
pub const DEFAULT_SCREEN_HEIGHT: i32 = 1920;

/// Name of the pseudo-screen an outcome uses to leave the app.
pub const EXIT: &str = "EXIT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    // Declaration order is the lexicographic order of the names.
    Click,
    LongClick,
    Scroll,
    TextInput,
    Back,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::Click,
        EventKind::LongClick,
        EventKind::Scroll,
        EventKind::TextInput,
        EventKind::Back,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Click => "click",
            EventKind::LongClick => "long_click",
            EventKind::Scroll => "scroll",
            EventKind::TextInput => "text_input",
            EventKind::Back => "back",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionTable {
    pub entries: BTreeMap<FunctionId, String>,
    pub changed_sets: BTreeMap<String, Vec<FunctionId>>,
}

impl FunctionTable {
    pub fn contains(&self, id: FunctionId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn signature(&self, id: FunctionId) -> Result<&str> {
        self.entries
            .get(&id)
            .map(String::as_str)
            .ok_or(Error::UnknownFunction(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = FunctionId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn changed_set(&self, name: &str) -> Result<&[FunctionId]> {
        self.changed_sets
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownChangedSet(name.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Widget {
    #[serde(rename = "class")]
    pub widget_class: String,
    pub resource_id: String,
    #[serde(default)]
    pub text: String,
    /// `[left, top, right, bottom]` in pixels.
    pub bounds: [i32; 4],
    #[serde(rename = "events")]
    pub supported_events: Vec<EventKind>,
}

impl Widget {
    pub fn supports(&self, kind: EventKind) -> bool {
        self.supported_events.contains(&kind)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Screen {
    #[serde(rename = "id")]
    pub screen_id: String,
    pub activity: String,
    #[serde(default)]
    pub widgets: Vec<Widget>,
}

/// One GUI event. `widget_index` is `None` for screen-level events (back).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    #[serde(rename = "event")]
    pub event_kind: EventKind,
    #[serde(rename = "widget", default, skip_serializing_if = "Option::is_none")]
    pub widget_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
}

impl ActionSpec {
    pub fn on_widget(event_kind: EventKind, widget_index: usize) -> Self {
        ActionSpec {
            event_kind,
            widget_index: Some(widget_index),
            payload: None,
        }
    }

    pub fn back() -> Self {
        ActionSpec {
            event_kind: EventKind::Back,
            widget_index: None,
            payload: None,
        }
    }

    /// Identity used for transition lookup; payloads do not select transitions.
    pub fn key(&self) -> ActionKey {
        ActionKey {
            event_kind: self.event_kind,
            widget_index: self.widget_index,
        }
    }
}

impl fmt::Display for ActionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.widget_index {
            Some(w) => write!(f, "{}(w{})", self.event_kind, w),
            None => write!(f, "{}", self.event_kind),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionKey {
    pub event_kind: EventKind,
    pub widget_index: Option<usize>,
}

/// Exact rational probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Probability {
    pub num: u64,
    pub den: u64,
}

impl Probability {
    pub const ONE: Probability = Probability { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Self {
        Probability { num, den }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Where an outcome lands: a screen, or out of the app.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Destination {
    Screen(String),
    Exit,
}

impl From<String> for Destination {
    fn from(s: String) -> Self {
        if s == EXIT {
            Destination::Exit
        } else {
            Destination::Screen(s)
        }
    }
}

impl From<Destination> for String {
    fn from(d: Destination) -> Self {
        match d {
            Destination::Screen(s) => s,
            Destination::Exit => EXIT.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(rename = "p")]
    pub probability: Probability,
    #[serde(rename = "to")]
    pub to_screen: Destination,
    #[serde(rename = "covers", default)]
    pub covered_functions: BTreeSet<FunctionId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "from")]
    pub from_screen: String,
    pub action: ActionSpec,
    pub outcomes: Vec<Outcome>,
}

/// A rendered screen: the observation an agent acts on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuiState {
    pub screen_id: String,
    pub activity: String,
    pub widgets: Vec<Widget>,
}

impl GuiState {
    pub fn from_screen(screen: &Screen) -> Self {
        GuiState {
            screen_id: screen.screen_id.clone(),
            activity: screen.activity.clone(),
            widgets: screen.widgets.clone(),
        }
    }
}

/// On-disk layout of an app model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppModelFile {
    pub name: String,
    #[serde(default)]
    pub version: String,
    pub entry: String,
    #[serde(default = "default_width")]
    pub screen_width: i32,
    #[serde(default = "default_height")]
    pub screen_height: i32,
    pub screens: Vec<Screen>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    #[serde(default)]
    pub functions: BTreeMap<FunctionId, String>,
    #[serde(default)]
    pub changed_sets: BTreeMap<String, Vec<FunctionId>>,
}

fn default_width() -> i32 {
    DEFAULT_SCREEN_WIDTH
}

fn default_height() -> i32 {
    DEFAULT_SCREEN_HEIGHT
}

/// A validated, indexed, immutable simulated app.
#[derive(Clone, Debug)]
pub struct AppModel {
    pub name: String,
    pub version: String,
    pub entry_screen: String,
    pub screen_width: i32,
    pub screen_height: i32,
    pub screens: Vec<Screen>,
    pub transitions: Vec<Transition>,
    pub function_table: FunctionTable,
    screen_index: HashMap<String, usize>,
    transition_index: HashMap<(usize, ActionKey), usize>,
}

impl PartialEq for AppModel {
    fn eq(&self, other: &Self) -> bool {
        self.to_file_json() == other.to_file_json()
    }
}

impl AppModel {
    pub fn from_file(file: AppModelFile) -> Result<Self> {
        let AppModelFile {
            name,
            version,
            entry,
            screen_width,
            screen_height,
            screens,
            transitions,
            functions,
            changed_sets,
        } = file;
        let function_table = FunctionTable {
            entries: functions,
            changed_sets,
        };
        let mut screen_index = HashMap::with_capacity(screens.len());
        for (i, s) in screens.iter().enumerate() {
            if s.screen_id == EXIT {
                return Err(Error::Validation(format!("screen id `{EXIT}` is reserved")));
            }
            if screen_index.insert(s.screen_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate screen id `{}`",
                    s.screen_id
                )));
            }
        }
        let mut model = AppModel {
            name,
            version,
            entry_screen: entry,
            screen_width,
            screen_height,
            screens,
            transitions,
            function_table,
            screen_index,
            transition_index: HashMap::new(),
        };
        model.validate()?;
        let unreachable = model.unreachable_screens();
        if !unreachable.is_empty() {
            log::warn!(
                "app `{}`: {} screen(s) unreachable from entry: {:?}",
                model.name,
                unreachable.len(),
                unreachable
            );
        }
        Ok(model)
    }

    fn validate(&mut self) -> Result<()> {
        if !self.screen_index.contains_key(&self.entry_screen) {
            return Err(Error::Validation(format!(
                "entry screen `{}` does not exist",
                self.entry_screen
            )));
        }
        if self.screen_width <= 0 || self.screen_height <= 0 {
            return Err(Error::Validation("screen dimensions must be positive".into()));
        }
        for screen in &self.screens {
            for (wi, w) in screen.widgets.iter().enumerate() {
                let [l, t, r, b] = w.bounds;
                if !(l < r && t < b) {
                    return Err(Error::Validation(format!(
                        "screen `{}` widget {wi}: bounds {:?} not well-ordered",
                        screen.screen_id, w.bounds
                    )));
                }
                if l < 0 || t < 0 || r > self.screen_width || b > self.screen_height {
                    return Err(Error::Validation(format!(
                        "screen `{}` widget {wi}: bounds {:?} outside {}x{} screen",
                        screen.screen_id, w.bounds, self.screen_width, self.screen_height
                    )));
                }
                if w.supported_events.is_empty() {
                    return Err(Error::Validation(format!(
                        "screen `{}` widget {wi}: no supported events",
                        screen.screen_id
                    )));
                }
                if w.supports(EventKind::Back) {
                    return Err(Error::Validation(format!(
                        "screen `{}` widget {wi}: back is a screen-level event",
                        screen.screen_id
                    )));
                }
            }
        }
        for (set, ids) in &self.function_table.changed_sets {
            if let Some(id) = ids.iter().find(|id| !self.function_table.contains(**id)) {
                return Err(Error::Validation(format!(
                    "changed set `{set}` references undefined function {id}"
                )));
            }
        }

        let mut transition_index = HashMap::with_capacity(self.transitions.len());
        for (ti, t) in self.transitions.iter().enumerate() {
            let from = *self.screen_index.get(&t.from_screen).ok_or_else(|| {
                Error::Validation(format!(
                    "transition {ti} starts at undefined screen `{}`",
                    t.from_screen
                ))
            })?;
            self.check_action(&self.screens[from], &t.action)
                .map_err(|e| Error::Validation(format!("transition {ti}: {e}")))?;
            if t.outcomes.is_empty() {
                return Err(Error::Validation(format!("transition {ti} has no outcomes")));
            }
            // Exact rational sum: sum num_i * (L / den_i) == L.
            let mut lcm: u128 = 1;
            for o in &t.outcomes {
                let Probability { num, den } = o.probability;
                if den == 0 || num == 0 || num > den {
                    return Err(Error::Validation(format!(
                        "transition {ti}: probability {num}/{den} outside (0, 1]"
                    )));
                }
                lcm = lcm_u128(lcm, den as u128);
            }
            let total: u128 = t
                .outcomes
                .iter()
                .map(|o| o.probability.num as u128 * (lcm / o.probability.den as u128))
                .sum();
            if total != lcm {
                return Err(Error::Validation(format!(
                    "transition {ti}: outcome probabilities do not sum to 1"
                )));
            }
            for o in &t.outcomes {
                if let Destination::Screen(to) = &o.to_screen {
                    if !self.screen_index.contains_key(to) {
                        return Err(Error::Validation(format!(
                            "transition {ti} targets undefined screen `{to}`"
                        )));
                    }
                }
                if let Some(id) = o
                    .covered_functions
                    .iter()
                    .find(|id| !self.function_table.contains(**id))
                {
                    return Err(Error::Validation(format!(
                        "transition {ti} covers undefined function {id}"
                    )));
                }
            }
            if transition_index
                .insert((from, t.action.key()), ti)
                .is_some()
            {
                return Err(Error::Validation(format!(
                    "transition {ti} duplicates ({}, {})",
                    t.from_screen, t.action
                )));
            }
        }
        self.transition_index = transition_index;
        Ok(())
    }

    fn check_action(&self, screen: &Screen, action: &ActionSpec) -> Result<()> {
        match action.widget_index {
            None if action.event_kind == EventKind::Back => Ok(()),
            None => Err(Error::InvalidAction(format!(
                "{} requires a widget on screen `{}`",
                action.event_kind, screen.screen_id
            ))),
            Some(_) if action.event_kind == EventKind::Back => Err(Error::InvalidAction(
                "back does not target a widget".into(),
            )),
            Some(w) => {
                let widget = screen.widgets.get(w).ok_or_else(|| {
                    Error::InvalidAction(format!(
                        "widget {w} out of range on screen `{}`",
                        screen.screen_id
                    ))
                })?;
                if widget.supports(action.event_kind) {
                    Ok(())
                } else {
                    Err(Error::InvalidAction(format!(
                        "widget {w} on screen `{}` does not support {}",
                        screen.screen_id, action.event_kind
                    )))
                }
            }
        }
    }

    pub fn screen(&self, screen_id: &str) -> Result<&Screen> {
        self.screen_index
            .get(screen_id)
            .map(|&i| &self.screens[i])
            .ok_or_else(|| Error::UnknownScreen(screen_id.to_string()))
    }

    pub(crate) fn screen_idx(&self, screen_id: &str) -> Result<usize> {
        self.screen_index
            .get(screen_id)
            .copied()
            .ok_or_else(|| Error::UnknownScreen(screen_id.to_string()))
    }

    pub(crate) fn transition_for(&self, screen: usize, key: ActionKey) -> Option<&Transition> {
        self.transition_index
            .get(&(screen, key))
            .map(|&i| &self.transitions[i])
    }

    pub fn entry_state(&self) -> GuiState {
        let screen = self.screen(&self.entry_screen).expect("validated entry");
        GuiState::from_screen(screen)
    }

    pub fn to_file(&self) -> AppModelFile {
        AppModelFile {
            name: self.name.clone(),
            version: self.version.clone(),
            entry: self.entry_screen.clone(),
            screen_width: self.screen_width,
            screen_height: self.screen_height,
            screens: self.screens.clone(),
            transitions: self.transitions.clone(),
            functions: self.function_table.entries.clone(),
            changed_sets: self.function_table.changed_sets.clone(),
        }
    }

    pub fn to_file_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("app model serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: AppModelFile =
            serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        AppModel::from_file(file)
    }

    /// Short content hash identifying this model.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// BFS distance (in actions) from the entry to every screen, following
    /// any outcome with positive probability. Unreachable screens are `None`.
    pub fn screen_distances(&self) -> Vec<Option<usize>> {
        let mut adj = vec![Vec::new(); self.screens.len()];
        for t in &self.transitions {
            let from = self.screen_index[&t.from_screen];
            for o in &t.outcomes {
                if let Destination::Screen(to) = &o.to_screen {
                    adj[from].push(self.screen_index[to]);
                }
            }
        }
        let entry = self.screen_index[&self.entry_screen];
        let mut dist = vec![None; self.screens.len()];
        dist[entry] = Some(0);
        let mut queue = VecDeque::from([entry]);
        while let Some(s) = queue.pop_front() {
            let d = dist[s].unwrap();
            for &n in &adj[s] {
                if dist[n].is_none() {
                    dist[n] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Largest BFS distance of any reachable screen from the entry.
    pub fn bfs_depth(&self) -> usize {
        self.screen_distances()
            .into_iter()
            .flatten()
            .max()
            .unwrap_or(0)
    }

    pub fn unreachable_screens(&self) -> Vec<String> {
        self.screen_distances()
            .iter()
            .zip(&self.screens)
            .filter(|(d, _)| d.is_none())
            .map(|(_, s)| s.screen_id.clone())
            .collect()
    }
}

fn gcd_u128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub(crate) fn lcm_u128(a: u128, b: u128) -> u128 {
    a / gcd_u128(a, b) * b
}

pub fn load_app_model(path: impl AsRef<Path>) -> Result<AppModel> {
    let text = std::fs::read_to_string(path.as_ref())?;
    AppModel::from_json_str(&text)
}

/// Bundled fixtures.
pub mod fixtures {
    use super::AppModel;

    pub const DIARY_TOY_JSON: &str = include_str!("../../fixtures/diary_toy.json");

    /// Twelve-screen diary app used throughout the tests.
    pub fn diary_toy() -> AppModel {
        AppModel::from_json_str(DIARY_TOY_JSON).expect("bundled fixture is valid")
    }
}

//! Reproducible synthetic apps.
//!
//! Screens form a navigation tree rooted at the entry. Every non-entry
//! screen has an `onCreate` function covered on arrival, handler widgets
//! covering further functions, up/home/back controls, and inert widgets.
//! Packages follow the navigation tree, so function signatures carry the
//! feature path that leads to them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ActionSpec, AppModel, AppModelFile, Destination, EventKind, FunctionId, Outcome, Probability,
    Screen, Transition, Widget, DEFAULT_SCREEN_HEIGHT, DEFAULT_SCREEN_WIDTH,
};
use crate::error::{Error, Result};

const ROW_TOP: i32 = 200;
const ROW_HEIGHT: i32 = 100;
/// Widgets that fit on one screen column.
pub const MAX_WIDGETS_PER_SCREEN: usize = ((DEFAULT_SCREEN_HEIGHT - ROW_TOP) / ROW_HEIGHT) as usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_screens: usize,
    pub n_functions: usize,
    pub branching: usize,
    pub noop_fraction: f64,
    pub exit_fraction: f64,
    pub seed: u64,
    /// Fraction of navigation transitions that fail one time in ten.
    #[serde(default = "default_stochastic")]
    pub stochastic_fraction: f64,
    /// Number of named changed-function sets ("commits") to emit.
    #[serde(default = "default_commits")]
    pub n_commits: usize,
}

fn default_stochastic() -> f64 {
    0.1
}

fn default_commits() -> usize {
    5
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_screens: 50,
            n_functions: 150,
            branching: 2,
            noop_fraction: 0.4,
            exit_fraction: 0.05,
            seed: 1,
            stochastic_fraction: default_stochastic(),
            n_commits: default_commits(),
        }
    }
}

const FEATURES: &[&str] = &[
    "account", "profile", "cart", "order", "payment", "search", "feed", "inbox", "chat", "contact",
    "gallery", "camera", "album", "note", "task", "reminder", "calendar", "event", "map", "place",
    "route", "wallet", "card", "invoice", "report", "chart", "budget", "goal", "habit", "timer",
    "alarm", "music", "playlist", "podcast", "video", "download", "upload", "share", "comment",
    "review", "rating", "coupon", "offer", "store", "product", "catalog", "wishlist", "checkout",
    "shipping", "tracking", "support", "ticket", "faq", "privacy", "security", "backup", "sync",
    "device", "network", "theme", "language", "font", "widget", "badge", "reward", "level",
    "friend", "group", "team", "project", "document", "folder", "file", "scanner", "recipe",
    "meal", "workout", "sleep", "weather", "news",
];

const VERBS: &[&str] = &[
    "save", "delete", "edit", "refresh", "toggle", "submit", "filter", "sort", "export", "import",
    "archive", "pin", "rename", "duplicate", "select", "expand", "collapse", "retry", "confirm",
    "cancel", "like", "follow", "mute", "report", "schedule", "attach", "preview", "reset",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct ScreenPlan {
    word: String,
    package: String,
    class: String,
    parent: Option<usize>,
    depth: usize,
    children: Vec<usize>,
    on_create: Option<FunctionId>,
    handlers: Vec<(FunctionId, String)>,
}

fn widget(class: &str, resource_id: String, text: String, row: usize, events: Vec<EventKind>) -> Widget {
    let top = ROW_TOP + row as i32 * ROW_HEIGHT;
    Widget {
        widget_class: class.to_string(),
        resource_id,
        text,
        bounds: [40, top, DEFAULT_SCREEN_WIDTH - 40, top + ROW_HEIGHT - 10],
        supported_events: events,
    }
}

fn single(to: Destination, covers: BTreeSet<FunctionId>) -> Vec<Outcome> {
    vec![Outcome {
        probability: Probability::ONE,
        to_screen: to,
        covered_functions: covers,
    }]
}

pub fn generate_synthetic_app(spec: &GeneratorSpec) -> Result<AppModel> {
    if spec.n_screens == 0 {
        return Err(Error::Infeasible("n_screens must be at least 1".into()));
    }
    if spec.branching == 0 {
        return Err(Error::Infeasible("branching must be at least 1".into()));
    }
    for (name, f) in [
        ("noop_fraction", spec.noop_fraction),
        ("exit_fraction", spec.exit_fraction),
        ("stochastic_fraction", spec.stochastic_fraction),
    ] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Infeasible(format!("{name} must lie in [0, 1)")));
        }
    }
    if spec.n_screens > 1 && spec.branching + 2 > MAX_WIDGETS_PER_SCREEN {
        return Err(Error::Infeasible(format!(
            "branching {} needs more action slots than a screen holds ({MAX_WIDGETS_PER_SCREEN})",
            spec.branching
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let app_pkg = format!("com.synth.app{}", spec.seed);

    // Navigation tree, filled shallowest level first.
    let mut words: Vec<String> = FEATURES.iter().map(|s| s.to_string()).collect();
    words.shuffle(&mut rng);
    let word_for = |i: usize| -> String {
        if i == 0 {
            "home".to_string()
        } else if i - 1 < words.len() {
            words[i - 1].clone()
        } else {
            format!("{}{}", words[(i - 1) % words.len()], (i - 1) / words.len() + 1)
        }
    };
    let mut plans: Vec<ScreenPlan> = Vec::with_capacity(spec.n_screens);
    plans.push(ScreenPlan {
        word: word_for(0),
        package: app_pkg.clone(),
        class: "MainActivity".into(),
        parent: None,
        depth: 0,
        children: Vec::new(),
        on_create: None,
        handlers: Vec::new(),
    });
    for i in 1..spec.n_screens {
        let open_depth = plans
            .iter()
            .filter(|p| p.children.len() < spec.branching)
            .map(|p| p.depth)
            .min()
            .expect("tree always has an open slot");
        let open: Vec<usize> = (0..plans.len())
            .filter(|&j| plans[j].children.len() < spec.branching && plans[j].depth == open_depth)
            .collect();
        let parent = *open.choose(&mut rng).unwrap();
        let word = word_for(i);
        let package = format!("{}.{}", plans[parent].package, word);
        plans[parent].children.push(i);
        plans.push(ScreenPlan {
            class: format!("{}Activity", capitalize(&word)),
            word,
            package,
            parent: Some(parent),
            depth: plans[parent].depth + 1,
            children: Vec::new(),
            on_create: None,
            handlers: Vec::new(),
        });
    }

    // Functions: onCreate for non-entry screens first, then handlers.
    let mut functions: BTreeMap<FunctionId, String> = BTreeMap::new();
    let mut next_id: FunctionId = 1;
    for plan in plans.iter_mut().skip(1) {
        if functions.len() == spec.n_functions {
            break;
        }
        plan.on_create = Some(next_id);
        functions.insert(next_id, format!("{}.{}.onCreate", plan.package, plan.class));
        next_id += 1;
    }
    let fixed_slots = |p: &ScreenPlan| -> usize {
        p.children.len() + if p.depth >= 1 { 1 } else { 0 } + if p.depth >= 2 { 1 } else { 0 }
    };
    let mut overflow: Vec<FunctionId> = Vec::new();
    let mut used_sigs: BTreeSet<String> = functions.values().cloned().collect();
    while functions.len() < spec.n_functions {
        let id = next_id;
        next_id += 1;
        let open: Vec<usize> = (0..plans.len())
            .filter(|&j| fixed_slots(&plans[j]) + plans[j].handlers.len() < MAX_WIDGETS_PER_SCREEN)
            .collect();
        let screen = match open.choose(&mut rng) {
            Some(&s) => s,
            None => rng.gen_range(0..plans.len()),
        };
        let plan = &plans[screen];
        let verb = VERBS[rng.gen_range(0..VERBS.len())];
        let obj = FEATURES[rng.gen_range(0..FEATURES.len())];
        let mut sig = if rng.gen_bool(0.3) {
            format!(
                "{}.data.{}Repository.{}{}",
                plan.package,
                capitalize(&plan.word),
                verb,
                capitalize(obj)
            )
        } else {
            format!("{}.{}.on{}{}", plan.package, plan.class, capitalize(verb), capitalize(obj))
        };
        let mut k = 2;
        while used_sigs.contains(&sig) {
            sig = format!("{sig}{k}");
            k += 1;
        }
        used_sigs.insert(sig.clone());
        functions.insert(id, sig);
        if open.is_empty() {
            overflow.push(id);
        } else {
            let label = format!("{verb}_{obj}");
            plans[screen].handlers.push((id, label));
        }
    }

    // Widgets and transitions.
    let mut screens = Vec::with_capacity(plans.len());
    let mut transitions = Vec::new();
    let ids: Vec<String> = plans
        .iter()
        .enumerate()
        .map(|(i, p)| format!("s{i:02}_{}", p.word))
        .collect();
    for (si, plan) in plans.iter().enumerate() {
        let sid = ids[si].clone();
        enum Role {
            Nav(usize),
            Up(usize),
            Home,
            Handler(FunctionId, String),
            Inert,
        }
        let mut roles: Vec<Role> = plan.children.iter().map(|&c| Role::Nav(c)).collect();
        if let Some(p) = plan.parent {
            roles.push(Role::Up(p));
        }
        if plan.depth >= 2 {
            roles.push(Role::Home);
        }
        roles.extend(plan.handlers.iter().map(|(f, l)| Role::Handler(*f, l.clone())));
        // +1 counts the screen-level back.
        let active = roles.len() + 1;
        let noop_target =
            (active as f64 * spec.noop_fraction / (1.0 - spec.noop_fraction)).round() as usize;
        let inert_widgets = noop_target.min(MAX_WIDGETS_PER_SCREEN.saturating_sub(roles.len()));
        let mut extra_inert_events = noop_target - inert_widgets;
        roles.extend((0..inert_widgets).map(|_| Role::Inert));
        roles.shuffle(&mut rng);

        let mut widgets = Vec::with_capacity(roles.len());
        for (row, role) in roles.iter().enumerate() {
            let (class, rid, text, event) = match role {
                Role::Nav(c) => (
                    ["android.widget.Button", "android.widget.TextView", "android.widget.ImageButton"]
                        [rng.gen_range(0..3)],
                    format!("nav_{}", plans[*c].word),
                    capitalize(&plans[*c].word),
                    EventKind::Click,
                ),
                Role::Up(_) => ("android.widget.ImageButton", "toolbar_up".to_string(), String::new(), EventKind::Click),
                Role::Home => ("android.widget.ImageButton", "toolbar_home".to_string(), String::new(), EventKind::Click),
                Role::Handler(_, label) => {
                    let (class, ev) = [
                        ("android.widget.Button", EventKind::Click),
                        ("android.widget.Switch", EventKind::Click),
                        ("android.widget.CheckBox", EventKind::Click),
                        ("android.widget.ImageButton", EventKind::LongClick),
                        ("android.widget.EditText", EventKind::TextInput),
                        ("androidx.recyclerview.widget.RecyclerView", EventKind::Scroll),
                    ][rng.gen_range(0..6)];
                    (class, format!("btn_{label}"), label.replace('_', " "), ev)
                }
                Role::Inert => (
                    ["android.widget.TextView", "android.widget.ImageView"][rng.gen_range(0..2)],
                    format!("label_{row}"),
                    String::new(),
                    EventKind::Click,
                ),
            };
            let mut events = vec![event];
            if extra_inert_events > 0 && !matches!(role, Role::Inert) {
                let extra = if event == EventKind::LongClick { EventKind::Click } else { EventKind::LongClick };
                events.push(extra);
                extra_inert_events -= 1;
            }
            widgets.push(widget(class, rid, text, row, events));

            let action = ActionSpec::on_widget(event, row);
            let outcomes = match role {
                Role::Nav(c) => {
                    let covers: BTreeSet<FunctionId> = plans[*c].on_create.into_iter().collect();
                    if rng.gen_bool(spec.stochastic_fraction) {
                        vec![
                            Outcome {
                                probability: Probability::new(9, 10),
                                to_screen: Destination::Screen(ids[*c].clone()),
                                covered_functions: covers,
                            },
                            Outcome {
                                probability: Probability::new(1, 10),
                                to_screen: Destination::Screen(sid.clone()),
                                covered_functions: BTreeSet::new(),
                            },
                        ]
                    } else {
                        single(Destination::Screen(ids[*c].clone()), covers)
                    }
                }
                Role::Up(p) => single(Destination::Screen(ids[*p].clone()), BTreeSet::new()),
                Role::Home => single(Destination::Screen(ids[0].clone()), BTreeSet::new()),
                Role::Handler(f, _) => {
                    let to = if rng.gen_bool(spec.exit_fraction) {
                        Destination::Exit
                    } else {
                        Destination::Screen(sid.clone())
                    };
                    single(to, BTreeSet::from([*f]))
                }
                Role::Inert => continue,
            };
            transitions.push(Transition {
                from_screen: sid.clone(),
                action,
                outcomes,
            });
        }
        if extra_inert_events > 0 {
            return Err(Error::Infeasible(format!(
                "screen {sid} needs {extra_inert_events} more inert action slots than it can host"
            )));
        }
        let back_to = match plan.parent {
            Some(p) => Destination::Screen(ids[p].clone()),
            None => Destination::Exit,
        };
        transitions.push(Transition {
            from_screen: sid.clone(),
            action: ActionSpec::back(),
            outcomes: single(back_to, BTreeSet::new()),
        });
        screens.push(Screen {
            screen_id: sid,
            activity: format!("{}.{}", plan.package, plan.class),
            widgets,
        });
    }

    // Functions that found no free widget ride along on existing transitions.
    for f in overflow {
        let candidates: Vec<usize> = (0..transitions.len())
            .filter(|&t| !transitions[t].outcomes[0].covered_functions.is_empty())
            .collect();
        let t = match candidates.choose(&mut rng) {
            Some(&t) => t,
            None => rng.gen_range(0..transitions.len()),
        };
        transitions[t].outcomes[0].covered_functions.insert(f);
    }

    // Commits: related functions drawn from one feature subtree.
    let mut changed_sets = BTreeMap::new();
    let covered_by_screen = |root: usize| -> Vec<FunctionId> {
        let mut stack = vec![root];
        let mut out = Vec::new();
        while let Some(s) = stack.pop() {
            out.extend(plans[s].on_create);
            out.extend(plans[s].handlers.iter().map(|(f, _)| *f));
            stack.extend(plans[s].children.iter().copied());
        }
        out.sort_unstable();
        out
    };
    for c in 0..spec.n_commits {
        let root = rng.gen_range(0..plans.len());
        let mut pool = covered_by_screen(root);
        if pool.is_empty() {
            pool = functions.keys().copied().collect();
        }
        if pool.is_empty() {
            break;
        }
        let k = rng.gen_range(3..=8).min(pool.len());
        let mut members: Vec<FunctionId> = pool.choose_multiple(&mut rng, k).copied().collect();
        members.sort_unstable();
        changed_sets.insert(format!("commit_{}", c + 1), members);
    }

    AppModel::from_file(AppModelFile {
        name: format!("synth_{}", spec.seed),
        version: "1.0".into(),
        entry: ids[0].clone(),
        screen_width: DEFAULT_SCREEN_WIDTH,
        screen_height: DEFAULT_SCREEN_HEIGHT,
        screens,
        transitions,
        functions,
        changed_sets,
    })
}

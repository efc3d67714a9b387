//! Built-in fixture apps. Small enough to verify by hand, rich enough to
//! exercise navigation, scrolling, slot editing, and note-worthy screens.

use std::sync::Arc;

use crate::gui_sim::{load_app_graph, World};

pub const TAKEOUT_APP: &str = include_str!("../fixtures/takeout.json");
pub const NOTES_APP: &str = include_str!("../fixtures/notes.json");
pub const WEATHER_APP: &str = include_str!("../fixtures/weather.json");
pub const CLOCK_APP: &str = include_str!("../fixtures/clock.json");

pub const ALL_APPS: [&str; 4] = [TAKEOUT_APP, NOTES_APP, WEATHER_APP, CLOCK_APP];

/// A world with every fixture app installed.
pub fn fixture_world() -> Arc<World> {
    let mut world = World::new();
    for doc in ALL_APPS {
        world.install(load_app_graph(doc).expect("fixture app graphs are valid"));
    }
    Arc::new(world)
}

/// A world with only the takeout app installed.
pub fn takeout_world() -> Arc<World> {
    let mut world = World::new();
    world.install(load_app_graph(TAKEOUT_APP).unwrap());
    Arc::new(world)
}

//! File formats, rendering and the live TCP front end.

pub mod events;
pub mod flow;
pub mod server;
pub mod viz;

pub use events::{read_events, read_events_from, write_events, write_events_to, EventHeader, EventReader};
pub use flow::{read_flow, read_flow_from, write_flow, write_flow_to};
pub use server::{Server, Session};
pub use viz::{arrow_grid_overlay, flow_to_rgb, save_png, MaxMagnitude};

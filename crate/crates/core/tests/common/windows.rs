use flowspike::encoding::{Event, EventWindow};
use proptest::prelude::*;

/// Random sorted windows up to 23×23 pixels with up to 299 events.
pub fn window() -> impl Strategy<Value = EventWindow> {
    (1usize..24, 1usize..24, 0u64..1_000_000, 1u64..20_000, 0usize..300).prop_flat_map(|(w, h, t0, dur, n)| {
        prop::collection::vec((0..w as u16, 0..h as u16, 0..dur, any::<bool>()), n).prop_map(move |mut raw| {
            raw.sort_by_key(|r| r.2);
            let events = raw
                .into_iter()
                .map(|(x, y, dt, on)| Event::new(x, y, t0 + dt, if on { 1 } else { -1 }))
                .collect();
            EventWindow::new(events, t0, t0 + dur, w, h).unwrap()
        })
    })
}

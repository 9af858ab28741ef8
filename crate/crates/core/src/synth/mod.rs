//! Synthetic cities and ride-hailing panels.

mod city;
mod io;
mod panel;

pub use city::{
    axial_to_point, generate_city, point_to_axial, Archetype, ArchetypeCount, CategoryVocab, City, CityConfig,
    County, GridCell, Poi, DEFAULT_EDGE_M,
};
pub use io::{
    format_timestamp, parse_timestamp, read_city, read_grid_activity_csv, read_panel_csv, read_vocab, write_city,
    write_grid_activity_csv, write_panel_csv, write_text, write_vocab, PANEL_HEADER,
};
pub use panel::{
    generate_grid_activity, generate_panel, generate_panel_with, is_half_hour_aligned, weekday_hour, Effects,
    ExogenousPanel, HourDay, Indicator, PanelConfig, SeriesPanel, Templates, DEFAULT_EVENT_TYPES,
    DEFAULT_HOLIDAY_TYPES, EVENT_NAMES, HOLIDAY_NAMES, STEPS_PER_DAY, STEPS_PER_WEEK,
};

//! POI category counts around stations.
//!
//! The canonical source is a static CSV snapshot (`station_id,c0,...,c75`).
//! Providers that query a places service go through [`PoiProvider`]; the
//! replay provider serves recorded responses so no test depends on a live
//! quota-bound service.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POI_DIM: usize = 76;

/// Place categories, one per POI vector slot.
pub const POI_TYPES: [&str; POI_DIM] = [
    "airport", "amusement_park", "aquarium", "art_gallery", "atm", "bakery", "bank", "bar",
    "beauty_salon", "bicycle_store", "book_store", "bus_station", "cafe", "campground",
    "car_dealer", "car_rental", "car_repair", "car_wash", "church", "city_hall",
    "clothing_store", "convenience_store", "courthouse", "dentist", "department_store", "doctor",
    "drugstore", "electronics_store", "fire_station", "florist", "furniture_store", "gas_station",
    "gym", "hair_care", "hardware_store", "home_goods_store", "hospital", "jewelry_store",
    "laundry", "library", "light_rail_station", "liquor_store", "local_government_office",
    "lodging", "meal_delivery", "meal_takeaway", "mosque", "movie_theater", "museum",
    "night_club", "park", "parking", "pet_store", "pharmacy", "physiotherapist", "police",
    "post_office", "primary_school", "restaurant", "school", "secondary_school", "shoe_store",
    "shopping_mall", "spa", "stadium", "store", "subway_station", "supermarket", "synagogue",
    "tourist_attraction", "train_station", "transit_station", "travel_agency", "university",
    "veterinary_care", "zoo",
];

pub const DEFAULT_RADIUS_M: f64 = 600.0;

pub type PoiCounts = Vec<u32>;

pub fn load_poi(path: &Path) -> Result<BTreeMap<String, PoiCounts>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_poi(file)
}

/// Accepts `station_id,c0,...,c75` rows (an optional header starting with
/// `station_id` is skipped) and `station_id,[c0,...,c75]` rows.
pub fn parse_poi<R: Read>(reader: R) -> Result<BTreeMap<String, PoiCounts>> {
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Format(format!("POI file line {lineno}: {e}")))?;
        let line = line.trim();
        if line.is_empty() || (lineno == 1 && line.starts_with("station_id")) {
            continue;
        }
        let (id, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("POI file line {lineno}: expected station_id,counts")))?;
        let rest = rest.trim();
        let body = rest
            .strip_prefix('[')
            .map(|r| r.strip_suffix(']').unwrap_or(r))
            .unwrap_or(rest);
        let counts: std::result::Result<Vec<u32>, _> =
            body.split(',').map(|c| c.trim().parse::<u32>()).collect();
        let counts = counts.map_err(|e| {
            Error::Format(format!("POI file line {lineno}: counts must be non-negative integers ({e})"))
        })?;
        if counts.len() != POI_DIM {
            return Err(Error::Format(format!(
                "POI file line {lineno}: expected {POI_DIM} counts, found {}",
                counts.len()
            )));
        }
        out.insert(id.trim().to_string(), counts);
    }
    Ok(out)
}

/// Counts over [`POI_TYPES`]; a place with several known types counts once per type.
pub fn counts_from_places(places: &[Place]) -> PoiCounts {
    let mut counts = vec![0u32; POI_DIM];
    for p in places {
        for ty in &p.types {
            if let Some(k) = POI_TYPES.iter().position(|t| t == ty) {
                counts[k] += 1;
            }
        }
    }
    counts
}

/// One place returned by a nearby-search service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Place {
    #[serde(default)]
    pub name: String,
    pub types: Vec<String>,
}

pub trait PoiProvider {
    fn nearby(&self, latitude: f64, longitude: f64, radius_m: f64) -> Result<Vec<Place>>;
}

/// Connection settings for a places service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub radius_m: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            base_url: "https://maps.googleapis.com/maps/api/place/nearbysearch/json".into(),
            api_key_env: "PLACES_API_KEY".into(),
            radius_m: DEFAULT_RADIUS_M,
            timeout_secs: 10,
            max_retries: 3,
        }
    }
}

impl ProviderConfig {
    /// Request URL for one lookup (the key is appended by the client).
    pub fn request_url(&self, latitude: f64, longitude: f64) -> String {
        format!(
            "{}?location={latitude},{longitude}&radius={}",
            self.base_url, self.radius_m
        )
    }
}

fn cache_key(latitude: f64, longitude: f64, radius_m: f64) -> String {
    format!("{latitude:.6},{longitude:.6},{radius_m:.0}")
}

/// Serves recorded responses from a JSON file `{ "lat,lon,radius": [places] }`.
#[derive(Debug, Clone, Default)]
pub struct ReplayProvider {
    responses: BTreeMap<String, Vec<Place>>,
}

impl ReplayProvider {
    pub fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let responses = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("replay file {}: {e}", path.display())))?;
        Ok(ReplayProvider { responses })
    }

    pub fn insert(&mut self, latitude: f64, longitude: f64, radius_m: f64, places: Vec<Place>) {
        self.responses
            .insert(cache_key(latitude, longitude, radius_m), places);
    }
}

impl PoiProvider for ReplayProvider {
    fn nearby(&self, latitude: f64, longitude: f64, radius_m: f64) -> Result<Vec<Place>> {
        self.responses
            .get(&cache_key(latitude, longitude, radius_m))
            .cloned()
            .ok_or_else(|| Error::Lookup {
                kind: "recorded POI response",
                id: cache_key(latitude, longitude, radius_m),
            })
    }
}

/// Wraps a provider and records every response for later replay.
pub struct RecordingProvider<P> {
    inner: P,
    path: PathBuf,
    recorded: std::sync::Mutex<BTreeMap<String, Vec<Place>>>,
}

impl<P: PoiProvider> RecordingProvider<P> {
    pub fn new(inner: P, path: impl Into<PathBuf>) -> Self {
        RecordingProvider {
            inner,
            path: path.into(),
            recorded: Default::default(),
        }
    }

    pub fn save(&self) -> Result<()> {
        let map = self.recorded.lock().expect("recorder lock");
        let text = serde_json::to_string_pretty(&*map)
            .map_err(|e| Error::Format(format!("cannot serialize recording: {e}")))?;
        std::fs::write(&self.path, text).map_err(|e| Error::io(&self.path, e))
    }
}

impl<P: PoiProvider> PoiProvider for RecordingProvider<P> {
    fn nearby(&self, latitude: f64, longitude: f64, radius_m: f64) -> Result<Vec<Place>> {
        let places = self.inner.nearby(latitude, longitude, radius_m)?;
        self.recorded
            .lock()
            .expect("recorder lock")
            .insert(cache_key(latitude, longitude, radius_m), places.clone());
        Ok(places)
    }
}

/// Counts for every `(station_id, lat, lon)` through a provider.
pub fn fetch_counts<P: PoiProvider + ?Sized>(
    provider: &P,
    stations: &[(String, f64, f64)],
    radius_m: f64,
) -> Result<BTreeMap<String, PoiCounts>> {
    stations
        .iter()
        .map(|(id, lat, lon)| Ok((id.clone(), counts_from_places(&provider.nearby(*lat, *lon, radius_m)?))))
        .collect()
}

pub fn write_poi<W: std::io::Write>(counts: &BTreeMap<String, PoiCounts>, mut w: W) -> Result<()> {
    let header: Vec<String> = std::iter::once("station_id".to_string())
        .chain((0..POI_DIM).map(|i| format!("c{i}")))
        .collect();
    let io = |e| Error::io("<poi output>", e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (id, c) in counts {
        let row: Vec<String> = c.iter().map(u32::to_string).collect();
        writeln!(w, "{id},{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}

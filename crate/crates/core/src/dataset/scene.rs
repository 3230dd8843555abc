use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-type suffixes that terminate every camera name.
const CAMERA_TYPES: [&[&str]; 4] = [&["mobo", "c"], &["mobo", "m"], &["mobo"], &["iqeye"]];

/// Identity of one scene sub-directory, `YYYYMMDD_fireName_cameraName`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneMeta {
    pub date: NaiveDate,
    pub fire_name: String,
    pub camera_name: String,
    pub raw: String,
}

impl SceneMeta {
    /// Re-joins the parsed fields with the delimiters found in `raw`.
    pub fn rejoin(&self) -> String {
        let bytes = self.raw.as_bytes();
        let first = bytes.get(8).copied().unwrap_or(b'_') as char;
        let second = bytes.get(9 + self.fire_name.len()).copied().unwrap_or(b'_') as char;
        format!(
            "{}{first}{}{second}{}",
            self.date.format("%Y%m%d"),
            self.fire_name,
            self.camera_name
        )
    }
}

/// Parses a scene directory name into date, fire name and camera name.
///
/// Both `_` and `-` are accepted as delimiters. When the part after the date
/// contains a `_`, the camera name is everything after the last `_`; otherwise
/// the camera is recognised from the end of a `-`-joined token list as
/// `station[-subcode][-direction]-type`.
pub fn parse_scene_name(name: &str) -> Result<SceneMeta> {
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::Parse("empty scene name".into()));
    }
    let date_part = name
        .get(..8)
        .filter(|d| d.bytes().all(|b| b.is_ascii_digit()));
    let date_part =
        date_part.ok_or_else(|| Error::Parse(format!("{name:?}: missing YYYYMMDD prefix")))?;
    let date = NaiveDate::parse_from_str(date_part, "%Y%m%d")
        .map_err(|e| Error::Parse(format!("{name:?}: invalid date {date_part}: {e}")))?;
    match name.as_bytes().get(8) {
        Some(b'_') | Some(b'-') => {}
        _ => {
            return Err(Error::Parse(format!(
                "{name:?}: expected delimiter after date"
            )))
        }
    }
    let rest = &name[9..];

    let (fire_name, camera_name) = if let Some(pos) = rest.rfind('_') {
        let camera = &rest[pos + 1..];
        let tokens: Vec<&str> = camera.split('-').collect();
        if camera_type_len(&tokens).is_none() || tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::Parse(format!(
                "{name:?}: no camera suffix in {camera:?}"
            )));
        }
        (&rest[..pos], camera)
    } else {
        let tokens: Vec<&str> = rest.split('-').collect();
        let n_cam = camera_token_count(&tokens)
            .ok_or_else(|| Error::Parse(format!("{name:?}: no camera suffix found")))?;
        let fire_tokens = tokens.len() - n_cam;
        let fire_len: usize =
            tokens[..fire_tokens].iter().map(|t| t.len()).sum::<usize>() + fire_tokens - 1;
        (&rest[..fire_len], &rest[fire_len + 1..])
    };
    if fire_name.is_empty() {
        return Err(Error::Parse(format!("{name:?}: empty fire name")));
    }
    Ok(SceneMeta {
        date,
        fire_name: fire_name.to_string(),
        camera_name: camera_name.to_string(),
        raw: name.to_string(),
    })
}

fn camera_type_len(tokens: &[&str]) -> Option<usize> {
    CAMERA_TYPES
        .iter()
        .find(|suffix| tokens.len() > suffix.len() && tokens.ends_with(suffix))
        .map(|suffix| suffix.len())
}

fn is_direction(t: &str) -> bool {
    matches!(t, "n" | "s" | "e" | "w")
}

fn is_station(t: &str) -> bool {
    !t.is_empty()
        && t.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
}

/// A station sub-code such as `tcs8`: letters followed by digits.
fn is_subcode(t: &str) -> bool {
    let letters = t.bytes().take_while(|b| b.is_ascii_lowercase()).count();
    letters > 0 && letters < t.len() && t.bytes().skip(letters).all(|b| b.is_ascii_digit())
}

/// Number of trailing tokens forming the camera name, leaving at least one
/// token for the fire name.
fn camera_token_count(tokens: &[&str]) -> Option<usize> {
    let mut n = camera_type_len(tokens)?;
    let avail = |n: usize| tokens.len().checked_sub(n + 1).map(|i| tokens[i]);
    if let Some(t) = avail(n) {
        if is_direction(t) && tokens.len() > n + 2 {
            n += 1;
        }
    }
    let station = avail(n).filter(|t| is_station(t) && tokens.len() > n + 1)?;
    n += 1;
    if is_subcode(station) {
        if let Some(t) = avail(n) {
            if t.bytes().all(|b| b.is_ascii_lowercase()) && !t.is_empty() && tokens.len() > n + 1 {
                n += 1;
            }
        }
    }
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parts(name: &str) -> (String, String, String) {
        let m = parse_scene_name(name).unwrap();
        (m.date.to_string(), m.fire_name, m.camera_name)
    }

    #[test]
    fn parses_underscore_names() {
        assert_eq!(
            parts("20160604_FIRE_rm-n-mobo-c"),
            ("2016-06-04".into(), "FIRE".into(), "rm-n-mobo-c".into())
        );
        assert_eq!(
            parts("20171207_Lilac_rm-s-mobo"),
            ("2017-12-07".into(), "Lilac".into(), "rm-s-mobo".into())
        );
        assert_eq!(parts("20160619_FIRE_lp-e-iqeye").2, "lp-e-iqeye");
        assert_eq!(
            parts("20160604_FIRE_smer-tcs3-mobo-c").2,
            "smer-tcs3-mobo-c"
        );
        assert_eq!(
            parts("20200807_AppleFire-backfire-operation_hp-n-mobo-c").1,
            "AppleFire-backfire-operation"
        );
    }

    #[test]
    fn parses_dash_only_names() {
        assert_eq!(parts("20190814_FIRE-pi-s-mobo-c").1, "FIRE");
        assert_eq!(parts("20190814_FIRE-pi-s-mobo-c").2, "pi-s-mobo-c");
        assert_eq!(
            parts("20190825_FIRE-smer-tcs8-mobo-c").2,
            "smer-tcs8-mobo-c"
        );
        assert_eq!(
            parts("20220905-FairviewFire-smer-tcs3-mobo-c").2,
            "smer-tcs3-mobo-c"
        );
        let (_, fire, cam) = parts("20220302-Jimfire-0921-stgo-e-mobo-c");
        assert_eq!(
            (fire.as_str(), cam.as_str()),
            ("Jimfire-0921", "stgo-e-mobo-c")
        );
        let (_, fire, cam) = parts("20220405-fire-in-Fallbrook-rm-s-mobo-m");
        assert_eq!(
            (fire.as_str(), cam.as_str()),
            ("fire-in-Fallbrook", "rm-s-mobo-m")
        );
        assert_eq!(
            parts("20200906-BobcatFire-wilson-e-mobo-c").2,
            "wilson-e-mobo-c"
        );
    }

    #[test]
    fn rejects_malformed_names() {
        assert!(matches!(
            parse_scene_name("notadate_x_y"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(parse_scene_name(""), Err(Error::Parse(_))));
        assert!(matches!(
            parse_scene_name("20161345_FIRE_rm-n-mobo-c"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_scene_name("20160604_FIRE_nocamera"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_scene_name("20160604_FIRE"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn rejoin_reproduces_raw() {
        for name in [
            "20160604_FIRE_rm-n-mobo-c",
            "20190814_FIRE-pi-s-mobo-c",
            "20220302-Jimfire-0921-stgo-e-mobo-c",
            "20200807_AppleFire-backfire-operation_hp-n-mobo-c",
        ] {
            assert_eq!(parse_scene_name(name).unwrap().rejoin(), name);
        }
    }
}

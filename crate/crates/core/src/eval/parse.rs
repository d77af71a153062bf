use std::sync::OnceLock;

use regex::Regex;
use tracing::debug;

use crate::ClickPoint;

/// Why a raw answer yielded no usable click.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParseFailure {
    /// Fewer than two numbers in the text.
    Unparseable,
    /// A point was read but lies outside the image.
    OutOfImage(ClickPoint),
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex"))
}

/// Read a click point from model output.
///
/// Takes the first two numbers in the text. If both are at most 1.0 they are
/// treated as unit-normalized and scaled by the image size with
/// nearest-integer rounding; otherwise they are absolute pixels, kept as
/// written. Points outside `[0, width] x [0, height]` are reported as
/// [`ParseFailure::OutOfImage`].
pub fn parse_prediction(raw: &str, width: u32, height: u32) -> Result<ClickPoint, ParseFailure> {
    let mut nums = number_re()
        .find_iter(raw)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite());
    let (Some(x), Some(y)) = (nums.next(), nums.next()) else {
        return Err(ParseFailure::Unparseable);
    };
    let point = if x <= 1.0 && y <= 1.0 {
        debug!(raw, "treating answer as unit-normalized");
        ClickPoint::new((x * width as f64).round(), (y * height as f64).round())
    } else {
        ClickPoint::new(x, y)
    };
    if point.x < 0.0 || point.y < 0.0 || point.x > width as f64 || point.y > height as f64 {
        return Err(ParseFailure::OutOfImage(point));
    }
    Ok(point)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absolute_pair() {
        assert_eq!(
            parse_prediction("(512, 384)", 1920, 1080),
            Ok(ClickPoint::new(512.0, 384.0))
        );
    }

    #[test]
    fn normalized_pair_scales() {
        assert_eq!(
            parse_prediction("[0.25, 0.5]", 1000, 800),
            Ok(ClickPoint::new(250.0, 400.0))
        );
    }

    #[test]
    fn prose_without_numbers() {
        assert_eq!(
            parse_prediction("I cannot find it", 100, 100),
            Err(ParseFailure::Unparseable)
        );
        assert_eq!(parse_prediction("only 7", 100, 100), Err(ParseFailure::Unparseable));
    }

    #[test]
    fn outside_image() {
        assert!(matches!(
            parse_prediction("(101, 5)", 100, 100),
            Err(ParseFailure::OutOfImage(_))
        ));
        assert!(matches!(
            parse_prediction("(-4, 5)", 100, 100),
            Err(ParseFailure::OutOfImage(_))
        ));
        assert_eq!(
            parse_prediction("(100, 100)", 100, 100),
            Ok(ClickPoint::new(100.0, 100.0))
        );
    }
}

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Contiguous windows of equal width, advancing by the stride.
    Fixed,
    /// Prefixes of growing length.
    Expanding,
}

/// Row range `[start, start + len)` of a source trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub source: usize,
    pub start: usize,
    pub len: usize,
    pub mode: WindowMode,
}

impl Window {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Windows over a trajectory of `rows` samples. Fixed mode starts a window
/// every `stride` rows; expanding mode yields prefixes of length
/// `width, width + stride, …`.
pub fn make_windows(source: usize, rows: usize, width: usize, mode: WindowMode, stride: usize) -> Vec<Window> {
    let stride = stride.max(1);
    if width == 0 || width > rows {
        log::warn!("window width {width} does not fit a trajectory of {rows} rows");
        return Vec::new();
    }
    match mode {
        WindowMode::Fixed => (0..=rows - width)
            .step_by(stride)
            .map(|start| Window {
                source,
                start,
                len: width,
                mode,
            })
            .collect(),
        WindowMode::Expanding => (width..=rows)
            .step_by(stride)
            .map(|len| Window {
                source,
                start: 0,
                len,
                mode,
            })
            .collect(),
    }
}

/// Prefix windows with explicit lengths; lengths beyond `rows` are dropped.
pub fn prefix_windows(source: usize, rows: usize, sizes: &[usize]) -> Vec<Window> {
    sizes
        .iter()
        .filter(|&&n| n >= 1 && n <= rows)
        .map(|&len| Window {
            source,
            start: 0,
            len,
            mode: WindowMode::Expanding,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_partition() {
        let w = make_windows(0, 30, 10, WindowMode::Fixed, 10);
        let ranges: Vec<_> = w.iter().map(Window::range).collect();
        assert_eq!(ranges, vec![0..10, 10..20, 20..30]);
    }

    #[test]
    fn width_one_covers_every_sample() {
        let w = make_windows(2, 7, 1, WindowMode::Fixed, 1);
        assert_eq!(w.len(), 7);
        assert!(w
            .iter()
            .enumerate()
            .all(|(i, w)| w.start == i && w.len == 1 && w.source == 2));
    }

    #[test]
    fn too_wide_is_empty() {
        assert!(make_windows(0, 5, 6, WindowMode::Fixed, 1).is_empty());
    }

    #[test]
    fn expanding_prefixes() {
        let w = make_windows(0, 1000, 100, WindowMode::Expanding, 200);
        let lens: Vec<_> = w.iter().map(|w| w.len).collect();
        assert_eq!(lens, vec![100, 300, 500, 700, 900]);
        let p = prefix_windows(0, 1000, &[100, 300, 500, 700, 900, 2000]);
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|w| w.start == 0));
    }
}

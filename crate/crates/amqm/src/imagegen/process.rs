//! Process parameters and the quality-label tables.
//!
//! The machine grid is six extruder speeds by four extruder temperatures.
//! Three fast-and-cold cells fail to print at all; the remaining 21 cells
//! form the set-point classification target. A scalar badness in [0, 1]
//! summarizes how defect-prone a set point is and drives both the grade
//! table and the synthetic defect densities.

use std::fmt;

use crate::error::{Error, Result};

/// Extruder speeds of the machine grid, mm/s.
pub const GRID_SPEEDS: [f64; 6] = [50.0, 100.0, 200.0, 400.0, 800.0, 1000.0];
/// Extruder temperatures of the machine grid, degrees Celsius.
pub const GRID_TEMPS: [f64; 4] = [185.0, 200.0, 230.0, 260.0];

pub const SPEED_MIN: f64 = 50.0;
pub const SPEED_MAX: f64 = 1000.0;
pub const TEMP_MIN: f64 = 185.0;
pub const TEMP_MAX: f64 = 260.0;

/// The two controllable factors: extruder speed (mm/s) and extruder
/// temperature (degrees C).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessState {
    speed: f64,
    temperature: f64,
}

impl ProcessState {
    pub fn new(speed: f64, temperature: f64) -> Result<ProcessState> {
        if !speed.is_finite() || !(SPEED_MIN..=SPEED_MAX).contains(&speed) {
            return Err(Error::domain(format!(
                "speed {speed} mm/s outside [{SPEED_MIN}, {SPEED_MAX}]"
            )));
        }
        if !temperature.is_finite() || !(TEMP_MIN..=TEMP_MAX).contains(&temperature) {
            return Err(Error::domain(format!(
                "temperature {temperature} C outside [{TEMP_MIN}, {TEMP_MAX}]"
            )));
        }
        Ok(ProcessState { speed, temperature })
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Five-level print quality, best to worst, plus the Failure marker for
/// set points that produce no part at all. Failure is never a member of
/// the 5-grade classification target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QualityGrade {
    A,
    B,
    C,
    D,
    E,
    Failure,
}

pub const GRADES: [QualityGrade; 5] = [
    QualityGrade::A,
    QualityGrade::B,
    QualityGrade::C,
    QualityGrade::D,
    QualityGrade::E,
];

impl QualityGrade {
    /// Class index for the 5-grade target; Failure has none.
    pub fn class_index(&self) -> Option<usize> {
        match self {
            QualityGrade::A => Some(0),
            QualityGrade::B => Some(1),
            QualityGrade::C => Some(2),
            QualityGrade::D => Some(3),
            QualityGrade::E => Some(4),
            QualityGrade::Failure => None,
        }
    }

    pub fn from_class_index(idx: usize) -> Result<QualityGrade> {
        GRADES
            .get(idx)
            .copied()
            .ok_or_else(|| Error::domain(format!("grade index {idx} out of range 0..5")))
    }

    pub fn parse(s: &str) -> Result<QualityGrade> {
        match s {
            "A" => Ok(QualityGrade::A),
            "B" => Ok(QualityGrade::B),
            "C" => Ok(QualityGrade::C),
            "D" => Ok(QualityGrade::D),
            "E" => Ok(QualityGrade::E),
            "Failure" => Ok(QualityGrade::Failure),
            _ => Err(Error::domain(format!("unknown grade {s:?}"))),
        }
    }
}

impl fmt::Display for QualityGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QualityGrade::A => "A",
            QualityGrade::B => "B",
            QualityGrade::C => "C",
            QualityGrade::D => "D",
            QualityGrade::E => "E",
            QualityGrade::Failure => "Failure",
        };
        f.write_str(s)
    }
}

/// One of the 21 valid cells of the speed x temperature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetPointClass {
    speed_index: usize,
    temp_index: usize,
}

impl SetPointClass {
    pub fn new(speed_index: usize, temp_index: usize) -> Result<SetPointClass> {
        if speed_index >= GRID_SPEEDS.len() || temp_index >= GRID_TEMPS.len() {
            return Err(Error::domain(format!(
                "grid cell ({speed_index}, {temp_index}) outside the 6x4 grid"
            )));
        }
        if cell_fails(speed_index, temp_index) {
            return Err(Error::domain(format!(
                "grid cell ({speed_index}, {temp_index}) is a Failure cell"
            )));
        }
        Ok(SetPointClass {
            speed_index,
            temp_index,
        })
    }

    pub fn speed_index(&self) -> usize {
        self.speed_index
    }

    pub fn temp_index(&self) -> usize {
        self.temp_index
    }

    pub fn state(&self) -> ProcessState {
        ProcessState {
            speed: GRID_SPEEDS[self.speed_index],
            temperature: GRID_TEMPS[self.temp_index],
        }
    }

    pub fn grade(&self) -> QualityGrade {
        true_grade(&self.state()).expect("grid cell state is always in range")
    }

    /// Canonical index in 0..21, ordering valid cells by
    /// (speed_index, temp_index).
    pub fn class_index(&self) -> usize {
        valid_set_points()
            .iter()
            .position(|c| c == self)
            .expect("constructed set points are always valid")
    }

    pub fn from_class_index(idx: usize) -> Result<SetPointClass> {
        valid_set_points()
            .get(idx)
            .copied()
            .ok_or_else(|| Error::domain(format!("set-point class index {idx} out of range 0..21")))
    }

    /// Stable name used in manifests and reports, e.g. `s200_t230`.
    pub fn name(&self) -> String {
        format!(
            "s{}_t{}",
            GRID_SPEEDS[self.speed_index] as u32, GRID_TEMPS[self.temp_index] as u32
        )
    }

    pub fn parse_name(name: &str) -> Result<SetPointClass> {
        let err = || Error::domain(format!("unparseable set-point name {name:?}"));
        let rest = name.strip_prefix('s').ok_or_else(err)?;
        let (speed_str, temp_str) = rest.split_once("_t").ok_or_else(err)?;
        let speed: f64 = speed_str.parse().map_err(|_| err())?;
        let temp: f64 = temp_str.parse().map_err(|_| err())?;
        let speed_index = GRID_SPEEDS
            .iter()
            .position(|&s| s == speed)
            .ok_or_else(err)?;
        let temp_index = GRID_TEMPS.iter().position(|&t| t == temp).ok_or_else(err)?;
        SetPointClass::new(speed_index, temp_index)
    }
}

impl fmt::Display for SetPointClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Whether a grid cell fails to print: cold extruder (below 190 C) at
/// speeds above 200 mm/s.
fn cell_fails(speed_index: usize, temp_index: usize) -> bool {
    GRID_TEMPS[temp_index] < 190.0 && GRID_SPEEDS[speed_index] > 200.0
}

/// All 21 valid grid cells, ordered by (speed_index, temp_index).
pub fn valid_set_points() -> &'static [SetPointClass] {
    static CELLS: std::sync::OnceLock<Vec<SetPointClass>> = std::sync::OnceLock::new();
    CELLS.get_or_init(|| {
        let mut cells = Vec::new();
        for speed_index in 0..GRID_SPEEDS.len() {
            for temp_index in 0..GRID_TEMPS.len() {
                if !cell_fails(speed_index, temp_index) {
                    cells.push(SetPointClass {
                        speed_index,
                        temp_index,
                    });
                }
            }
        }
        cells
    })
}

pub const NUM_SET_POINT_CLASSES: usize = 21;

/// Speed position on a log scale spanning the machine's 20x range:
/// 0 at 50 mm/s, 1 at 1000 mm/s.
pub fn speed_fraction(state: &ProcessState) -> f64 {
    (state.speed / SPEED_MIN).ln() / (SPEED_MAX / SPEED_MIN).ln()
}

/// Temperature position on the machine's linear range: 0 at 185 C,
/// 1 at 260 C.
pub fn temp_fraction(state: &ProcessState) -> f64 {
    (state.temperature - TEMP_MIN) / (TEMP_MAX - TEMP_MIN)
}

/// Scalar defect-proneness in [0, 1]: zero at slow-and-hot, one at
/// fast-and-cold.
///
/// b = clamp(0.7 * u + 0.3 * (1 - v), 0, 1) with u = speed_fraction and
/// v = temp_fraction.
pub fn badness(state: &ProcessState) -> f64 {
    let u = speed_fraction(state);
    let v = temp_fraction(state);
    (0.7 * u + 0.3 * (1.0 - v)).clamp(0.0, 1.0)
}

/// Grade label for a process state: Failure on the no-print cells,
/// otherwise badness thresholded at 0.2 / 0.4 / 0.6 / 0.8.
pub fn true_grade(state: &ProcessState) -> Result<QualityGrade> {
    // Constructor has validated the range; re-derive the failure rule from
    // the continuous state so off-grid states classify consistently.
    if state.temperature < 190.0 && state.speed > 200.0 {
        return Ok(QualityGrade::Failure);
    }
    let b = badness(state);
    Ok(if b < 0.2 {
        QualityGrade::A
    } else if b < 0.4 {
        QualityGrade::B
    } else if b < 0.6 {
        QualityGrade::C
    } else if b < 0.8 {
        QualityGrade::D
    } else {
        QualityGrade::E
    })
}

/// Map from set-point class index to grade class index, used to collapse
/// 21-class predictions onto the 5-grade target.
pub fn set_point_to_grade_mapping() -> Vec<usize> {
    valid_set_points()
        .iter()
        .map(|cell| {
            cell.grade()
                .class_index()
                .expect("valid cells never grade as Failure")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(speed: f64, temp: f64) -> ProcessState {
        ProcessState::new(speed, temp).unwrap()
    }

    #[test]
    fn rejects_out_of_range_states() {
        assert!(ProcessState::new(49.0, 200.0).is_err());
        assert!(ProcessState::new(1001.0, 200.0).is_err());
        assert!(ProcessState::new(100.0, 184.9).is_err());
        assert!(ProcessState::new(100.0, 260.1).is_err());
        assert!(ProcessState::new(f64::NAN, 200.0).is_err());
    }

    #[test]
    fn badness_at_slow_hot_is_zero() {
        assert_eq!(badness(&state(50.0, 260.0)), 0.0);
    }

    #[test]
    fn badness_fast_warm() {
        // u = 1, v = 0.2: 0.7 + 0.3 * 0.8 = 0.94.
        assert!((badness(&state(1000.0, 200.0)) - 0.94).abs() < 1e-12);
    }

    #[test]
    fn badness_matches_independent_formula() {
        // 0.7 * ln(2)/ln(20) + 0.3, evaluated independently.
        let expected = 0.7 * 2.0_f64.ln() / 20.0_f64.ln() + 0.3;
        let b = badness(&state(100.0, 185.0));
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 0.4619).abs() < 5e-4);
    }

    #[test]
    fn badness_monotone_over_lattice() {
        // Nondecreasing in speed at fixed temperature, nonincreasing in
        // temperature at fixed speed, over a 50x50 lattice.
        let n = 50;
        let speeds: Vec<f64> = (0..n)
            .map(|i| SPEED_MIN + (SPEED_MAX - SPEED_MIN) * i as f64 / (n - 1) as f64)
            .collect();
        let temps: Vec<f64> = (0..n)
            .map(|i| TEMP_MIN + (TEMP_MAX - TEMP_MIN) * i as f64 / (n - 1) as f64)
            .collect();
        for &t in &temps {
            for w in speeds.windows(2) {
                assert!(badness(&state(w[0], t)) <= badness(&state(w[1], t)) + 1e-12);
            }
        }
        for &s in &speeds {
            for w in temps.windows(2) {
                assert!(badness(&state(s, w[0])) >= badness(&state(s, w[1])) - 1e-12);
            }
        }
    }

    #[test]
    fn grade_examples() {
        assert_eq!(true_grade(&state(50.0, 260.0)).unwrap(), QualityGrade::A);
        assert_eq!(
            true_grade(&state(400.0, 185.0)).unwrap(),
            QualityGrade::Failure
        );
        // b = 0.7 + 0.3 * 0.4 = 0.82 >= 0.8.
        assert_eq!(true_grade(&state(1000.0, 230.0)).unwrap(), QualityGrade::E);
    }

    #[test]
    fn grid_has_21_valid_cells_and_all_grades() {
        // Enumerate the full 6x4 grid against the formula.
        let mut failures = 0;
        let mut counts = [0usize; 5];
        for &s in GRID_SPEEDS.iter() {
            for &t in GRID_TEMPS.iter() {
                match true_grade(&state(s, t)).unwrap() {
                    QualityGrade::Failure => failures += 1,
                    g => counts[g.class_index().unwrap()] += 1,
                }
            }
        }
        assert_eq!(failures, 3);
        assert_eq!(counts.iter().sum::<usize>(), 21);
        assert_eq!(counts, [3, 4, 5, 6, 3]);
        assert_eq!(valid_set_points().len(), NUM_SET_POINT_CLASSES);
    }

    #[test]
    fn set_point_indices_round_trip() {
        for (i, cell) in valid_set_points().iter().enumerate() {
            assert_eq!(cell.class_index(), i);
            assert_eq!(SetPointClass::from_class_index(i).unwrap(), *cell);
            assert_eq!(SetPointClass::parse_name(&cell.name()).unwrap(), *cell);
        }
        assert!(SetPointClass::from_class_index(21).is_err());
        assert!(SetPointClass::new(3, 0).is_err()); // 400 mm/s at 185 C fails
    }

    #[test]
    fn grade_mapping_covers_all_cells() {
        let mapping = set_point_to_grade_mapping();
        assert_eq!(mapping.len(), 21);
        assert!(mapping.iter().all(|&g| g < 5));
        // Every grade appears at least once among the valid cells.
        for g in 0..5 {
            assert!(mapping.contains(&g), "grade index {g} missing from grid");
        }
    }
}

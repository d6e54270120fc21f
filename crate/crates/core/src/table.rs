//! Small helpers shared by the CSV writers and readers.

/// Full-precision float formatting: 17 significant digits, `.` separator.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Splits a CSV body into trimmed rows, checking the header.
pub fn read_rows<'a>(text: &'a str, header: &[&str]) -> Result<Vec<Vec<&'a str>>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| "empty CSV".to_string())?
        .split(',')
        .map(str::trim)
        .collect();
    if head != header {
        return Err(format!("expected header {:?}, found {:?}", header.join(","), head.join(",")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row: Vec<&str> = line.split(',').map(str::trim).collect();
            if row.len() == header.len() {
                Ok(row)
            } else {
                Err(format!("row {} has {} columns, expected {}", i + 2, row.len(), header.len()))
            }
        })
        .collect()
}

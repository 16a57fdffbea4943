//! Explicit-I/O baseline: each array is a plain file read and written with
//! positioned I/O, one block at a time, with the next input block read ahead
//! on a helper thread while the current one is computed.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use crate::bench::kernels::{Kernel, INIT_A, INIT_B, INIT_C};
use crate::bench::BenchError;

const ELEM: usize = std::mem::size_of::<f64>();

pub struct FileArrays {
    files: Vec<File>,
    paths: Vec<PathBuf>,
    len: usize,
}

fn io_err(path: &Path, e: std::io::Error) -> BenchError {
    BenchError::Io {
        path: path.to_owned(),
        source: e,
    }
}

impl FileArrays {
    /// Creates `<dir>/explicit_r<rank>_{a,b,c}.dat` holding the initial values.
    pub fn create(dir: &Path, rank: usize, len: usize) -> Result<Self, BenchError> {
        let mut files = Vec::new();
        let mut paths = Vec::new();
        for (name, value) in [("a", INIT_A), ("b", INIT_B), ("c", INIT_C)] {
            let path = dir.join(format!("explicit_r{rank}_{name}.dat"));
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            let chunk = vec![value; super::arrays::PASS_CHUNK_ELEMENTS];
            let mut at = 0;
            while at < len {
                let n = chunk.len().min(len - at);
                f.write_all_at(bytemuck::cast_slice(&chunk[..n]), (at * ELEM) as u64)
                    .map_err(|e| io_err(&path, e))?;
                at += n;
            }
            f.sync_all().map_err(|e| io_err(&path, e))?;
            files.push(f);
            paths.push(path);
        }
        Ok(Self { files, paths, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    fn read_block(&self, array: usize, lo: usize, buf: &mut [f64]) -> Result<(), BenchError> {
        self.files[array]
            .read_exact_at(bytemuck::cast_slice_mut(buf), (lo * ELEM) as u64)
            .map_err(|e| io_err(&self.paths[array], e))
    }

    /// One pass of `kernel` over all elements in blocks of `block` elements.
    /// With `synced`, every written block is forced to disk before the next
    /// one; the output file is always forced at the end.
    pub fn pass(&self, kernel: Kernel, scalar: f64, block: usize, synced: bool) -> Result<(), BenchError> {
        let block = block.max(1);
        let out = kernel.output();
        let inputs = kernel.inputs();
        let blocks: Vec<(usize, usize)> = (0..self.len)
            .step_by(block)
            .map(|lo| (lo, (lo + block).min(self.len)))
            .collect();

        thread::scope(|s| -> Result<(), BenchError> {
            let (tx, rx) = mpsc::sync_channel::<Result<Vec<Vec<f64>>, BenchError>>(1);
            let reader_blocks = blocks.clone();
            s.spawn(move || {
                for (lo, hi) in reader_blocks {
                    let mut bufs = Vec::with_capacity(inputs.len());
                    let mut failed = None;
                    for &array in inputs {
                        let mut buf = vec![0.0; hi - lo];
                        if let Err(e) = self.read_block(array, lo, &mut buf) {
                            failed = Some(e);
                            break;
                        }
                        bufs.push(buf);
                    }
                    let stop = failed.is_some();
                    if tx.send(failed.map_or(Ok(bufs), Err)).is_err() || stop {
                        return;
                    }
                }
            });

            let mut result = vec![0.0; block.min(self.len)];
            for &(lo, hi) in &blocks {
                let bufs = rx.recv().expect("reader sends one message per block")?;
                let ins: Vec<&[f64]> = bufs.iter().map(Vec::as_slice).collect();
                let dst = &mut result[..hi - lo];
                kernel.apply(scalar, &ins, dst);
                let f = &self.files[out];
                f.write_all_at(bytemuck::cast_slice(dst), (lo * ELEM) as u64)
                    .map_err(|e| io_err(&self.paths[out], e))?;
                if synced {
                    f.sync_data().map_err(|e| io_err(&self.paths[out], e))?;
                }
            }
            Ok(())
        })?;
        self.files[out].sync_data().map_err(|e| io_err(&self.paths[out], e))
    }

    pub fn read_element(&self, array: usize, index: usize) -> Result<f64, BenchError> {
        let mut v = [0.0];
        self.read_block(array, index, &mut v)?;
        Ok(v[0])
    }

    pub fn read_all(&self, array: usize) -> Result<Vec<f64>, BenchError> {
        let mut v = vec![0.0; self.len];
        self.read_block(array, 0, &mut v)?;
        Ok(v)
    }

    /// Closes and deletes the files.
    pub fn remove(self) -> Result<(), BenchError> {
        drop(self.files);
        for p in &self.paths {
            std::fs::remove_file(p).map_err(|e| io_err(p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::kernels::{ScalarState, A, B, C};

    #[test]
    fn passes_match_scalar_model() {
        let dir = tempfile::tempdir().unwrap();
        let files = FileArrays::create(dir.path(), 0, 1000).unwrap();
        let mut model = ScalarState::default();
        for synced in [false, true] {
            for k in Kernel::ALL {
                files.pass(k, 3.0, 64, synced).unwrap();
                model.step(k, 3.0);
            }
        }
        for array in [A, B, C] {
            let v = files.read_all(array).unwrap();
            assert!(v.iter().all(|&x| x == model.values[array]), "array {array}");
        }
        files.remove().unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn empty_arrays_are_fine() {
        let dir = tempfile::tempdir().unwrap();
        let files = FileArrays::create(dir.path(), 3, 0).unwrap();
        files.pass(Kernel::Triad, 3.0, 10, true).unwrap();
        assert!(files.read_all(A).unwrap().is_empty());
    }
}

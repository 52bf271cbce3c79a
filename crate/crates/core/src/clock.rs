//! Time, channels and threads behind one interface so the runtimes work
//! unchanged against the wall clock or the virtual-time scheduler.

use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

pub use crate::sim::RecvError;
use crate::sim::{secs_to_nanos, Sim, SimJoin, SimRx, SimTx};

#[derive(Clone, Debug)]
pub enum Clock {
    Real(Instant),
    Virtual(Sim),
}

impl Clock {
    pub fn real() -> Clock {
        Clock::Real(Instant::now())
    }

    /// A fresh simulation whose first actor is the calling thread.
    pub fn virtual_time() -> Clock {
        Clock::Virtual(Sim::new())
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Clock::Real(_) => "real",
            Clock::Virtual(_) => "virtual",
        }
    }

    /// Seconds since the clock was created.
    pub fn now(&self) -> f64 {
        match self {
            Clock::Real(start) => start.elapsed().as_secs_f64(),
            Clock::Virtual(sim) => sim.now(),
        }
    }

    pub fn sleep(&self, secs: f64) {
        if secs <= 0.0 {
            return;
        }
        match self {
            Clock::Real(_) => thread::sleep(Duration::from_secs_f64(secs)),
            Clock::Virtual(sim) => sim.sleep(secs),
        }
    }

    pub fn sleep_until(&self, at: f64) {
        match self {
            Clock::Real(_) => self.sleep(at - self.now()),
            Clock::Virtual(sim) => sim.sleep_until_nanos(secs_to_nanos(at)),
        }
    }

    pub fn channel<T: Send + 'static>(&self) -> (Tx<T>, Rx<T>) {
        match self {
            Clock::Real(_) => {
                let (tx, rx) = mpsc::channel();
                (Tx::Real(tx), Rx::Real(rx))
            }
            Clock::Virtual(sim) => {
                let (tx, rx) = sim.mailbox();
                (Tx::Virtual(tx), Rx::Virtual(rx))
            }
        }
    }

    pub fn spawn<T, F>(&self, name: &str, f: F) -> Join<T>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        match self {
            Clock::Real(_) => Join::Real(
                thread::Builder::new()
                    .name(name.to_string())
                    .spawn(f)
                    .expect("spawn thread"),
            ),
            Clock::Virtual(sim) => Join::Virtual(sim.spawn(name, f)),
        }
    }
}

pub enum Tx<T: Send + 'static> {
    Real(mpsc::Sender<T>),
    Virtual(SimTx<T>),
}

impl<T: Send + 'static> Clone for Tx<T> {
    fn clone(&self) -> Self {
        match self {
            Tx::Real(t) => Tx::Real(t.clone()),
            Tx::Virtual(t) => Tx::Virtual(t.clone()),
        }
    }
}

impl<T: Send + 'static> Tx<T> {
    /// Fails only when the receiving side is gone.
    pub fn send(&self, item: T) -> Result<(), T> {
        match self {
            Tx::Real(t) => t.send(item).map_err(|e| e.0),
            Tx::Virtual(t) => t.send(item),
        }
    }
}

pub enum Rx<T: Send + 'static> {
    Real(mpsc::Receiver<T>),
    Virtual(SimRx<T>),
}

impl<T: Send + 'static> Rx<T> {
    pub fn recv(&self) -> Result<T, RecvError> {
        match self {
            Rx::Real(r) => r.recv().map_err(|_| RecvError::Disconnected),
            Rx::Virtual(r) => r.recv(),
        }
    }

    pub fn recv_timeout(&self, secs: f64) -> Result<T, RecvError> {
        match self {
            Rx::Real(r) => r
                .recv_timeout(Duration::from_secs_f64(secs.max(0.0)))
                .map_err(|e| match e {
                    mpsc::RecvTimeoutError::Timeout => RecvError::Timeout,
                    mpsc::RecvTimeoutError::Disconnected => RecvError::Disconnected,
                }),
            Rx::Virtual(r) => r.recv_timeout(secs),
        }
    }

    /// Waits until absolute clock time `at` (seconds) at most.
    pub fn recv_until(&self, clock: &Clock, at: f64) -> Result<T, RecvError> {
        match self {
            Rx::Real(_) => self.recv_timeout(at - clock.now()),
            Rx::Virtual(r) => r.recv_deadline(Some(secs_to_nanos(at))),
        }
    }

    pub fn try_recv(&self) -> Option<T> {
        match self {
            Rx::Real(r) => r.try_recv().ok(),
            Rx::Virtual(r) => r.try_recv(),
        }
    }
}

pub enum Join<T> {
    Real(thread::JoinHandle<T>),
    Virtual(SimJoin<T>),
}

impl<T> Join<T> {
    /// Waits for the thread and returns its value, re-raising its panic.
    pub fn join(self) -> T {
        match self {
            Join::Real(h) => match h.join() {
                Ok(v) => v,
                Err(p) => std::panic::resume_unwind(p),
            },
            Join::Virtual(j) => j.join(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_channels_time_out_at_deadline() {
        let clock = Clock::virtual_time();
        let (tx, rx) = clock.channel::<u8>();
        assert_eq!(rx.recv_timeout(2.0), Err(RecvError::Timeout));
        assert!((clock.now() - 2.0).abs() < 1e-9);
        let c = clock.clone();
        let j = clock.spawn("late", move || {
            c.sleep(1.0);
            tx.send(9).unwrap();
        });
        assert_eq!(rx.recv(), Ok(9));
        assert!((clock.now() - 3.0).abs() < 1e-9);
        j.join();
    }

    #[test]
    fn real_clock_channel_roundtrip() {
        let clock = Clock::real();
        let (tx, rx) = clock.channel::<u8>();
        let j = clock.spawn("t", move || tx.send(1).unwrap());
        assert_eq!(rx.recv_timeout(5.0), Ok(1));
        j.join();
        assert_eq!(rx.recv_timeout(0.01), Err(RecvError::Disconnected));
    }
}

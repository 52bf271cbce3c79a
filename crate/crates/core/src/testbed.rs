//! A client and a server joined by an emulated link, for tests, benchmarks
//! and demos.

use crate::client::{Client, ClientConfig, SpeedProfile};
use crate::clock::{Clock, Join};
use crate::netsim::LinkConfig;
use crate::server::Server;
use crate::transport::{emulated_pair, LinkHandle};

pub struct Testbed {
    clock: Clock,
    client: Option<Client>,
    link: LinkHandle,
    server: Server,
    server_join: Option<Join<()>>,
}

impl Testbed {
    pub fn new(
        clock: Clock,
        link: LinkConfig,
        server: Server,
        speeds: SpeedProfile,
        config: ClientConfig,
    ) -> Testbed {
        let (client_ep, server_ep, handle) = emulated_pair(&clock, link);
        let server_join = server.spawn(server_ep);
        Testbed {
            client: Some(Client::new(client_ep, speeds, config)),
            clock,
            link: handle,
            server,
            server_join: Some(server_join),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn client(&self) -> &Client {
        self.client.as_ref().expect("testbed is live")
    }

    pub fn client_mut(&mut self) -> &mut Client {
        self.client.as_mut().expect("testbed is live")
    }

    pub fn link(&self) -> &LinkHandle {
        &self.link
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    /// Disconnects the client and waits for the server side to wind down.
    pub fn shutdown(mut self) -> Server {
        self.stop();
        self.server.clone()
    }

    fn stop(&mut self) {
        drop(self.client.take());
        if let Some(j) = self.server_join.take() {
            j.join();
        }
    }
}

impl Drop for Testbed {
    fn drop(&mut self) {
        if !std::thread::panicking() {
            self.stop();
        }
    }
}
